#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fusionformer/error.hpp"
#include "fusionformer/gradcheck.hpp"
#include "fusionformer/tensor.hpp"
#include "helpers.hpp"

namespace ff {
namespace {

using test::random_tensor;
using test::same_bits;

// Weighted sum with fixed random weights: a scalar probe that exercises every
// output coordinate with a distinct upstream gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed)));
}

TEST(Tensor, FactoriesAndAccess) {
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at({1, 2}), 6.0);
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_EQ(Tensor::scalar(2.5).rank(), 0u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
}

TEST(Matmul, HandArithmetic) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at({0, 0}), 17.0);
  EXPECT_EQ(c.at({1, 0}), 39.0);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = random_tensor({2, 2}, 1);
  EXPECT_TRUE(same_bits(matmul(eye, m), m));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({3, 4}), Tensor::zeros({5, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[5x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  const Tensor a = random_tensor({3, 4}, 2, true);
  const Tensor b = random_tensor({4, 2}, 3, true);
  const GradCheckResult r =
      finite_diff_check([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(Softmax, AnalyticCases) {
  const Tensor eq = softmax(Tensor::full({3}, 4.2), 0);
  for (double v : eq.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor two = softmax(Tensor::from({2}, {0.0, std::log(2.0)}), 0);
  EXPECT_NEAR(two.data()[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(two.data()[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeInputsStayFinite) {
  const Tensor y = softmax(Tensor::from({2}, {1000.0, 1001.0}), 0);
  // Shift-invariance oracle: softmax([0, 1]).
  const double e = std::exp(1.0);
  EXPECT_NEAR(y.data()[0], 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(y.data()[1], e / (1.0 + e), 1e-15);
  EXPECT_NEAR(y.data()[0], 0.2689, 1e-4);
  EXPECT_NEAR(y.data()[1], 0.7311, 1e-4);
}

TEST(Softmax, RowsSumToOneOverWideRange) {
  Rng rng(7);
  std::vector<double> v(50 * 9);
  for (double& x : v) x = rng.uniform(-1e4, 1e4);
  const Tensor y = softmax(Tensor::from({50, 9}, v), 1);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(y.at({r, c}), 0.0);
      s += y.at({r, c});
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, AnalyticCases) {
  const Tensor ones = Tensor::full({2}, 1.0);
  const Tensor zeros = Tensor::zeros({2});
  const Tensor flat = layer_norm(Tensor::full({2}, 3.0), ones, zeros);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const Tensor y = layer_norm(Tensor::from({2}, {1.0, 3.0}), ones, zeros, 0.0);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-15);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-15);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  const Tensor x = random_tensor({4, 8}, 4, true);
  const Tensor g = random_tensor({8}, 5, true);
  const Tensor b = random_tensor({8}, 6, true);
  const GradCheckResult r = finite_diff_check([&] { return probe(layer_norm(x, g, b), 7); },
                                              {{"x", x}, {"gamma", g}, {"beta", b}}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Permute, IndexSweepAndInvolution) {
  const Tensor x = random_tensor({9, 17, 4}, 8);
  const Tensor y = permute(x, {1, 0, 2});
  EXPECT_EQ(y.shape(), (Shape{17, 9, 4}));
  for (std::size_t t = 0; t < 9; ++t) {
    for (std::size_t j = 0; j < 17; ++j) {
      for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(x.at({t, j, d}), y.at({j, t, d}));
    }
  }
  EXPECT_TRUE(same_bits(permute(y, {1, 0, 2}), x));
  EXPECT_THROW(permute(x, {0, 0, 1}), ShapeError);
  EXPECT_THROW(permute(x, {0, 1}), ShapeError);
}

TEST(ConcatSplit, RoundTripAndShape) {
  const Tensor a = random_tensor({9, 3, 4}, 9);
  const Tensor b = random_tensor({9, 3, 4}, 10);
  const Tensor c = concat({a, b}, 0);
  EXPECT_EQ(c.shape(), (Shape{18, 3, 4}));
  const auto parts = split(c, 0, {9, 9});
  EXPECT_TRUE(same_bits(parts[0], a));
  EXPECT_TRUE(same_bits(parts[1], b));
  EXPECT_THROW(concat({a, Tensor::zeros({9, 2, 4})}, 0), ShapeError);
}

TEST(ConcatSplit, GradientRoutesToSlices) {
  const Tensor a = random_tensor({2, 3}, 11, true);
  const Tensor b = random_tensor({2, 2}, 12, true);
  // Only b's columns are weighted: a must receive exactly zero gradient.
  const Tensor w = Tensor::from({2, 5}, {0, 0, 0, 1, 2, 0, 0, 0, 3, 4});
  sum(mul(concat({a, b}, 1), w)).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(b.grad()[0], 1.0);
  EXPECT_EQ(b.grad()[3], 4.0);
}

TEST(FramewiseConv, IdentityAndBias) {
  const std::size_t T = 3;
  const std::size_t M = 4;
  const Tensor x = random_tensor({2 * T, M}, 13);
  std::vector<double> w(T * 2 * T, 0.0);
  for (std::size_t t = 0; t < T; ++t) w[t * 2 * T + t] = 1.0;
  const Tensor y = framewise_conv1d(x, Tensor::from({T, 2 * T}, w), Tensor::zeros({T}));
  EXPECT_TRUE(same_bits(y, slice(x, 0, 0, T)));

  const Tensor bias = Tensor::from({T}, {1.5, -2.0, 0.25});
  const Tensor z = framewise_conv1d(x, Tensor::zeros({T, 2 * T}), bias);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t m = 0; m < M; ++m) EXPECT_EQ(z.at({t, m}), bias.data()[t]);
  }
  EXPECT_THROW(framewise_conv1d(x, Tensor::zeros({T, T}), bias), ShapeError);
}

TEST(Elementwise, SimpleValues) {
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(mean(Tensor::full({3, 4}, 2.5)).item(), 2.5);
  EXPECT_THROW(sqrt(Tensor::scalar(-1.0)), NumericError);
  EXPECT_EQ(l2_norm_lastaxis(Tensor::from({1, 3}, {3, 4, 0})).item(), 5.0);
}

TEST(Broadcast, SuffixOnly) {
  const Tensor a = random_tensor({2, 3, 4}, 14);
  const Tensor b = random_tensor({3, 4}, 15);
  const Tensor c = add(a, b);
  EXPECT_EQ(c.at({1, 2, 3}), a.at({1, 2, 3}) + b.at({2, 3}));
  EXPECT_THROW(add(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST(Backward, TrivialGradients) {
  const Tensor x = random_tensor({5}, 16, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  const Tensor s = Tensor::scalar(3.0, true);
  mul(s, s).backward();
  EXPECT_EQ(s.grad()[0], 6.0);
}

TEST(Backward, LeafGradientsAccumulate) {
  const Tensor x = Tensor::scalar(2.0, true);
  scale(x, 3.0).backward();
  scale(x, 3.0).backward();
  EXPECT_EQ(x.grad()[0], 6.0);
  Tensor h = x;
  h.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  const Tensor x = random_tensor({3}, 17, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  const Tensor x = random_tensor({3}, 18, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(x, x));
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, QuadraticForm) {
  const Tensor x = random_tensor({4}, 19, true);
  const Tensor a = random_tensor({4, 4}, 20);
  const double err = finite_diff_check(
      [&](const Tensor& v) {
        return sum(mul(reshape(matmul(reshape(v, {1, 4}), a), {4}), v));
      },
      x, 1e-5);
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, EveryPrimitivePasses) {
  for (const auto& r : check_primitive_ops(1, 1e-5)) {
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
    EXPECT_GT(r.coordinates, 0u) << r.worst;
  }
}

TEST(GradCheck, RandomShapesUpToSixPerAxis) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Shape s{1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)};
    const Tensor a = random_tensor(s, 100 + trial, true);
    const Tensor b = random_tensor({s[1], s[2]}, 200 + trial, true);
    const Tensor m = random_tensor({s[2], 1 + rng.below(6)}, 300 + trial, true);
    const Tensor g = random_tensor({s[2]}, 400 + trial, true);
    const auto check = [&](const char* name, const std::function<Tensor()>& f,
                           std::vector<NamedTensor> leaves) {
      EXPECT_LT(finite_diff_check(f, leaves, 1e-5).max_rel_error, 1e-5)
          << name << " on " << shape_str(s);
    };
    check("add", [&] { return probe(add(a, b), 1); }, {{"a", a}, {"b", b}});
    check("mul", [&] { return probe(mul(a, b), 2); }, {{"a", a}, {"b", b}});
    check("gelu", [&] { return probe(gelu(a), 3); }, {{"a", a}});
    check("matmul", [&] { return probe(matmul(a, m), 4); }, {{"a", a}, {"m", m}});
    check("softmax", [&] { return probe(softmax(a, 1), 5); }, {{"a", a}});
    check("layer_norm", [&] { return probe(layer_norm(a, g, g), 6); },
          {{"a", a}, {"g", g}});
    check("l2_norm", [&] { return probe(l2_norm_lastaxis(a), 7); }, {{"a", a}});
    check("permute", [&] { return probe(permute(a, {2, 0, 1}), 8); }, {{"a", a}});
  }
}

TEST(GradCheck, InjectedFaultIsDetectedAndNamed) {
  debug::inject_gradient_fault("softmax", 1.5);
  const auto results = check_primitive_ops(1, 1e-5);
  debug::clear_gradient_fault();
  double worst = 0.0;
  std::string name;
  for (const auto& r : results) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      name = r.worst;
    }
  }
  EXPECT_GT(worst, 1e-3);
  EXPECT_EQ(name, "softmax");
}

TEST(GradCheck, NonDeterministicFunctionRejected) {
  const Tensor x = random_tensor({2}, 22, true);
  int calls = 0;
  EXPECT_THROW(finite_diff_check(
                   [&] {
                     ++calls;
                     return scale(sum(x), static_cast<double>(calls));
                   },
                   {{"x", x}}, 1e-5),
               NumericError);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  const Tensor a = random_tensor({4, 6}, 23);
  const Tensor b = random_tensor({6, 5}, 24);
  const auto f = [&] { return softmax(layer_norm(matmul(a, b), Tensor::full({5}, 1.0), Tensor::zeros({5})), 1); };
  EXPECT_TRUE(same_bits(f(), f()));
}

}  // namespace
}  // namespace ff
