#include <benchmark/benchmark.h>

#include <vector>

#include "fusionformer/kernels.hpp"
#include "fusionformer/rng.hpp"

namespace {

using namespace ff::kernels;

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  ff::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Token-by-weight products of the widest encoder (9 tokens, width 288) in
// the three layouts training uses: forward, input gradient, weight gradient.
GemmArgs shape(int layout) {
  GemmArgs g;
  g.batch = 1;
  switch (layout) {
    case 0:  // Y = X W
      g.m = 9, g.k = 288, g.n = 576;
      break;
    case 1:  // dX = dY W^T
      g.m = 9, g.k = 576, g.n = 288, g.trans_b = true;
      break;
    default:  // dW += X^T dY
      g.m = 288, g.k = 9, g.n = 576, g.trans_a = true, g.accumulate = true;
      break;
  }
  g.stride_a = g.m * g.k;
  g.stride_b = g.k * g.n;
  g.stride_c = g.m * g.n;
  return g;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const GemmArgs g = shape(static_cast<int>(state.range(0)));
  const auto a = random_vector(g.m * g.k, 1);
  const auto b = random_vector(g.k * g.n, 2);
  std::vector<double> c(g.m * g.n, 0.0);
  for (auto _ : state) {
    if (Parallel) {
      parallel::gemm(a, b, c, g);
    } else {
      serial::gemm(a, b, c, g);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(g.m * g.n * g.k));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  // Spatial attention scores: 9 frames x 4 heads x 17 x 17.
  const LineArgs l{9 * 4 * 17, 17, 1};
  const auto x = random_vector(l.outer * l.n, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if (Parallel) {
      parallel::softmax(x, y, l);
    } else {
      serial::softmax(x, y, l);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const NormArgs a{9 * 17, 32, 1e-5};
  const auto x = random_vector(a.rows * a.cols, 4);
  const std::vector<double> gamma(a.cols, 1.0), beta(a.cols, 0.0);
  std::vector<double> y(x.size()), xhat(x.size()), rstd(a.rows);
  for (auto _ : state) {
    if (Parallel) {
      parallel::layer_norm(x, gamma, beta, y, xhat, rstd, a);
    } else {
      serial::layer_norm(x, gamma, beta, y, xhat, rstd, a);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK_TEMPLATE(BM_Gemm, false)->Arg(0)->Arg(1)->Arg(2)->Name("gemm/serial");
BENCHMARK_TEMPLATE(BM_Gemm, true)->Arg(0)->Arg(1)->Arg(2)->Name("gemm/parallel");
BENCHMARK_TEMPLATE(BM_Softmax, false)->Name("softmax/serial");
BENCHMARK_TEMPLATE(BM_Softmax, true)->Name("softmax/parallel");
BENCHMARK_TEMPLATE(BM_LayerNorm, false)->Name("layer_norm/serial");
BENCHMARK_TEMPLATE(BM_LayerNorm, true)->Name("layer_norm/parallel");

BENCHMARK_MAIN();
