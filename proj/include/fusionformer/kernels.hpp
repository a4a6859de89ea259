#pragma once

// Dense numeric kernels behind the tensor ops.
//
// Two implementations are kept side by side:
//   serial::   straightforward loops, used as the reference in tests;
//   parallel:: OpenMP over independent output rows / lines, cache-friendly
//              loop order. Every output element is reduced in the same order
//              regardless of the thread count, so results are deterministic.
//
// The free functions at namespace scope dispatch on the process-wide backend.

#include <cstddef>
#include <span>

namespace ff::kernels {

enum class Backend { serial, parallel };

void set_backend(Backend b);
Backend backend();
bool parallel_available();

// Batched C = op(A) * op(B) (C += when accumulate).
// op(A) is m x k, op(B) is k x n, C is m x n; all row-major.
// A stored m x k (k x m when trans_a); B stored k x n (n x k when trans_b).
// stride_* is the element distance between consecutive batch entries; a zero
// stride broadcasts that operand across the batch.
struct GemmArgs {
  std::size_t batch = 1;
  std::size_t m = 0, n = 0, k = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;
  std::size_t stride_a = 0, stride_b = 0, stride_c = 0;
};

// Softmax over the middle extent of an (outer, n, inner) view.
struct LineArgs {
  std::size_t outer = 1, n = 0, inner = 1;
};

// Per-row layer normalization over `cols`. Saves xhat and 1/sqrt(var+eps).
struct NormArgs {
  std::size_t rows = 0, cols = 0;
  double eps = 1e-5;
};

namespace serial {
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g);
void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l);
// dx += y * (dy - sum(dy * y)) along each line.
void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l);
void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a);
// dx += rstd * (g - mean(g) - xhat * mean(g * xhat)), with g = dy * gamma.
void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                         std::span<const double> rstd, std::span<const double> gamma,
                         std::span<double> dx, const NormArgs& a);
}  // namespace serial

namespace parallel {
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g);
void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l);
// dx += y * (dy - sum(dy * y)) along each line.
void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l);
void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a);
// dx += rstd * (g - mean(g) - xhat * mean(g * xhat)), with g = dy * gamma.
void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                         std::span<const double> rstd, std::span<const double> gamma,
                         std::span<double> dx, const NormArgs& a);
}  // namespace parallel

// Dispatching entry points.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          const GemmArgs& g);
void softmax(std::span<const double> x, std::span<double> y, const LineArgs& l);
// dx += y * (dy - sum(dy * y)) along each line.
void softmax_backward(std::span<const double> y, std::span<const double> dy,
                      std::span<double> dx, const LineArgs& l);
void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> y, std::span<double> xhat,
                std::span<double> rstd, const NormArgs& a);
// dx += rstd * (g - mean(g) - xhat * mean(g * xhat)), with g = dy * gamma.
void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                         std::span<const double> rstd, std::span<const double> gamma,
                         std::span<double> dx, const NormArgs& a);

}  // namespace ff::kernels
