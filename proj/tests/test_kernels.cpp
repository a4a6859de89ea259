#include <gtest/gtest.h>

#include <vector>

#include "fusionformer/kernels.hpp"
#include "helpers.hpp"

namespace ff::kernels {
namespace {

using test::random_values;
using test::same_bits;

struct GemmCase {
  std::size_t batch, m, n, k;
  bool ta, tb, acc;
};

class GemmAgreement : public ::testing::TestWithParam<GemmCase> {};

TEST_P(GemmAgreement, ParallelMatchesSerialBitForBit) {
  const GemmCase c = GetParam();
  GemmArgs g;
  g.batch = c.batch;
  g.m = c.m;
  g.n = c.n;
  g.k = c.k;
  g.trans_a = c.ta;
  g.trans_b = c.tb;
  g.accumulate = c.acc;
  g.stride_a = c.m * c.k;
  g.stride_b = c.k * c.n;
  g.stride_c = c.m * c.n;
  const auto a = random_values(c.batch * c.m * c.k, 1);
  const auto b = random_values(c.batch * c.k * c.n, 2);
  std::vector<double> c1 = random_values(c.batch * c.m * c.n, 3);
  std::vector<double> c2 = c1;
  serial::gemm(a, b, c1, g);
  parallel::gemm(a, b, c2, g);
  EXPECT_TRUE(same_bits(c1, c2));
}

INSTANTIATE_TEST_SUITE_P(
    Shapes, GemmAgreement,
    ::testing::Values(GemmCase{1, 1, 1, 1, false, false, false},
                      GemmCase{1, 3, 5, 7, false, false, false},
                      GemmCase{1, 3, 5, 7, true, false, false},
                      GemmCase{1, 3, 5, 7, false, true, true},
                      GemmCase{1, 3, 5, 7, true, true, true},
                      GemmCase{4, 9, 17, 33, false, false, true},
                      GemmCase{1, 9, 576, 288, false, false, false},
                      GemmCase{1, 9, 288, 576, false, true, false},
                      GemmCase{1, 288, 576, 9, true, false, true},
                      GemmCase{36, 17, 17, 8, false, true, false},
                      GemmCase{36, 17, 8, 17, false, false, false}));

TEST(Gemm, SerialMatchesHandArithmetic) {
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> b{5, 6};
  std::vector<double> c(2);
  GemmArgs g;
  g.m = 2;
  g.n = 1;
  g.k = 2;
  serial::gemm(a, b, c, g);
  EXPECT_EQ(c[0], 17.0);
  EXPECT_EQ(c[1], 39.0);
}

TEST(Softmax, ParallelMatchesSerial) {
  for (const LineArgs l : {LineArgs{1, 5, 1}, LineArgs{3, 4, 7}, LineArgs{2000, 17, 1},
                           LineArgs{4, 300, 40}}) {
    const auto x = random_values(l.outer * l.n * l.inner, 4, 5.0);
    std::vector<double> y1(x.size()), y2(x.size());
    serial::softmax(x, y1, l);
    parallel::softmax(x, y2, l);
    EXPECT_TRUE(same_bits(y1, y2));

    const auto dy = random_values(x.size(), 5);
    std::vector<double> d1 = random_values(x.size(), 6);
    std::vector<double> d2 = d1;
    serial::softmax_backward(y1, dy, d1, l);
    parallel::softmax_backward(y1, dy, d2, l);
    EXPECT_TRUE(same_bits(d1, d2));
  }
}

TEST(LayerNorm, ParallelMatchesSerial) {
  for (const NormArgs a : {NormArgs{1, 2, 1e-5}, NormArgs{153, 32, 1e-5}, NormArgs{2000, 64, 1e-5}}) {
    const auto x = random_values(a.rows * a.cols, 7, 3.0);
    const auto gamma = random_values(a.cols, 8);
    const auto beta = random_values(a.cols, 9);
    std::vector<double> y1(x.size()), y2(x.size()), h1(x.size()), h2(x.size());
    std::vector<double> r1(a.rows), r2(a.rows);
    serial::layer_norm(x, gamma, beta, y1, h1, r1, a);
    parallel::layer_norm(x, gamma, beta, y2, h2, r2, a);
    EXPECT_TRUE(same_bits(y1, y2));
    EXPECT_TRUE(same_bits(h1, h2));
    EXPECT_TRUE(same_bits(r1, r2));

    const auto dy = random_values(x.size(), 10);
    std::vector<double> d1(x.size(), 0.5), d2(x.size(), 0.5);
    serial::layer_norm_backward(dy, h1, r1, gamma, d1, a);
    parallel::layer_norm_backward(dy, h1, r1, gamma, d2, a);
    EXPECT_TRUE(same_bits(d1, d2));
  }
}

TEST(Backend, SwitchingKeepsResults) {
  const Backend saved = backend();
  const auto a = random_values(40 * 30, 11);
  const auto b = random_values(30 * 50, 12);
  GemmArgs g;
  g.m = 40;
  g.n = 50;
  g.k = 30;
  std::vector<double> c1(g.m * g.n), c2(g.m * g.n);
  set_backend(Backend::serial);
  gemm(a, b, c1, g);
  set_backend(Backend::parallel);
  gemm(a, b, c2, g);
  set_backend(saved);
  EXPECT_TRUE(same_bits(c1, c2));
}

}  // namespace
}  // namespace ff::kernels
