// OpenMP kernels. Work is split over independent output rows (gemm, layer
// norm) or lines (softmax); each element's reduction runs in the same order as
// the serial reference, so the two agree bit for bit.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fusionformer/kernels.hpp"

namespace ff::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

#ifdef _OPENMP
std::atomic<Backend> g_backend{Backend::parallel};
#else
std::atomic<Backend> g_backend{Backend::serial};
#endif

}  // namespace

void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }
Backend backend() { return g_backend.load(std::memory_order_relaxed); }

bool parallel_available() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

namespace parallel {

namespace {

// Each task owns a panel of kBlock output columns of one batch entry and
// sweeps every row, so the panel of B stays in cache. Every element still
// sums its k products in ascending order, as the serial reference does.
constexpr std::size_t kBlock = 8;

template <std::size_t W>
inline void gemm_panel(const double* A, const double* B, double* C, std::size_t j0,
                       std::size_t width, const GemmArgs& g) {
  const std::size_t w = W ? W : width;
  for (std::size_t i = 0; i < g.m; ++i) {
    double acc[kBlock] = {};
    for (std::size_t p = 0; p < g.k; ++p) {
      const double av = g.trans_a ? A[p * g.m + i] : A[i * g.k + p];
      if (g.trans_b) {
        for (std::size_t jj = 0; jj < w; ++jj) acc[jj] += av * B[(j0 + jj) * g.k + p];
      } else {
        const double* brow = B + p * g.n + j0;
        for (std::size_t jj = 0; jj < w; ++jj) acc[jj] += av * brow[jj];
      }
    }
    double* crow = C + i * g.n + j0;
    for (std::size_t jj = 0; jj < w; ++jj) crow[jj] = g.accumulate ? crow[jj] + acc[jj] : acc[jj];
  }
}

}  // namespace

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g) {
  const std::size_t panels = (g.n + kBlock - 1) / kBlock;
  const std::size_t tasks = g.batch * panels;
  const bool go_parallel = g.batch * g.m * g.n * g.k >= kParallelWork;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::size_t bi = t / panels;
    const std::size_t j0 = (t % panels) * kBlock;
    const double* A = a.data() + bi * g.stride_a;
    const double* B = b.data() + bi * g.stride_b;
    double* C = c.data() + bi * g.stride_c;
    if (j0 + kBlock <= g.n) {
      gemm_panel<kBlock>(A, B, C, j0, kBlock, g);
    } else {
      gemm_panel<0>(A, B, C, j0, g.n - j0, g);
    }
  }
}

void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l) {
  const std::size_t lines = l.outer * l.inner;
#pragma omp parallel for schedule(static) if (lines * l.n >= kParallelWork)
  for (std::size_t line = 0; line < lines; ++line) {
    const std::size_t base = (line / l.inner) * l.n * l.inner + line % l.inner;
    double mx = x[base];
    for (std::size_t t = 1; t < l.n; ++t) mx = std::max(mx, x[base + t * l.inner]);
    double sum = 0.0;
    for (std::size_t t = 0; t < l.n; ++t) {
      const double e = std::exp(x[base + t * l.inner] - mx);
      y[base + t * l.inner] = e;
      sum += e;
    }
    for (std::size_t t = 0; t < l.n; ++t) y[base + t * l.inner] /= sum;
  }
}

void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l) {
  const std::size_t lines = l.outer * l.inner;
#pragma omp parallel for schedule(static) if (lines * l.n >= kParallelWork)
  for (std::size_t line = 0; line < lines; ++line) {
    const std::size_t base = (line / l.inner) * l.n * l.inner + line % l.inner;
    double dot = 0.0;
    for (std::size_t t = 0; t < l.n; ++t) {
      const std::size_t idx = base + t * l.inner;
      dot += dy[idx] * y[idx];
    }
    for (std::size_t t = 0; t < l.n; ++t) {
      const std::size_t idx = base + t * l.inner;
      dx[idx] += y[idx] * (dy[idx] - dot);
    }
  }
}

void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a) {
  const double inv_n = 1.0 / static_cast<double>(a.cols);
#pragma omp parallel for schedule(static) if (a.rows * a.cols >= kParallelWork)
  for (std::size_t r = 0; r < a.rows; ++r) {
    const std::size_t base = r * a.cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) mean += x[base + c];
    mean *= inv_n;
    double var = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double d = x[base + c] - mean;
      var += d * d;
    }
    var *= inv_n;
    const double rs = 1.0 / std::sqrt(var + a.eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double h = (x[base + c] - mean) * rs;
      xhat[base + c] = h;
      y[base + c] = h * gamma[c] + beta[c];
    }
  }
}

void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                         std::span<const double> rstd, std::span<const double> gamma,
                         std::span<double> dx, const NormArgs& a) {
  const double inv_n = 1.0 / static_cast<double>(a.cols);
#pragma omp parallel for schedule(static) if (a.rows * a.cols >= kParallelWork)
  for (std::size_t r = 0; r < a.rows; ++r) {
    const std::size_t base = r * a.cols;
    double mg = 0.0;
    double mgx = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double g = dy[base + c] * gamma[c];
      mg += g;
      mgx += g * xhat[base + c];
    }
    mg *= inv_n;
    mgx *= inv_n;
    for (std::size_t c = 0; c < a.cols; ++c) {
      const double g = dy[base + c] * gamma[c];
      dx[base + c] += rstd[r] * (g - mg - xhat[base + c] * mgx);
    }
  }
}

}  // namespace parallel

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g) {
  backend() == Backend::parallel ? parallel::gemm(a, b, c, g) : serial::gemm(a, b, c, g);
}

void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l) {
  backend() == Backend::parallel ? parallel::softmax(x, y, l) : serial::softmax(x, y, l);
}

void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l) {
  backend() == Backend::parallel ? parallel::softmax_backward(y, dy, dx, l)
                                 : serial::softmax_backward(y, dy, dx, l);
}

void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a) {
  backend() == Backend::parallel ? parallel::layer_norm(x, gamma, beta, y, xhat, rstd, a)
                                 : serial::layer_norm(x, gamma, beta, y, xhat, rstd, a);
}

void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                         std::span<const double> rstd, std::span<const double> gamma,
                         std::span<double> dx, const NormArgs& a) {
  backend() == Backend::parallel ? parallel::layer_norm_backward(dy, xhat, rstd, gamma, dx, a)
                                 : serial::layer_norm_backward(dy, xhat, rstd, gamma, dx, a);
}

}  // namespace ff::kernels
