// Reference kernels: plain loops, one output element at a time.

#include <algorithm>
#include <cmath>

#include "fusionformer/kernels.hpp"

namespace ff::kernels::serial {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g) {
  for (std::size_t bi = 0; bi < g.batch; ++bi) {
    const double* A = a.data() + bi * g.stride_a;
    const double* B = b.data() + bi * g.stride_b;
    double* C = c.data() + bi * g.stride_c;
    for (std::size_t i = 0; i < g.m; ++i) {
      for (std::size_t j = 0; j < g.n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < g.k; ++p) {
          const double av = g.trans_a ? A[p * g.m + i] : A[i * g.k + p];
          const double bv = g.trans_b ? B[j * g.k + p] : B[p * g.n + j];
          s += av * bv;
        }
        double& out = C[i * g.n + j];
        out = g.accumulate ? out + s : s;
      }
    }
  }
}

void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l) {
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
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
}

void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l) {
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
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
}

void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a) {
  const double inv_n = 1.0 / static_cast<double>(a.cols);
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

}  // namespace ff::kernels::serial
