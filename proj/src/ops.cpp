#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fusionformer/error.hpp"
#include "fusionformer/kernels.hpp"
#include "fusionformer/tensor.hpp"

namespace ff {

namespace {

using detail::Node;

std::span<double> parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad() : std::span<double>{};
}

const std::vector<double>& parent_data(const Node& self, std::size_t i) {
  return self.parents[i]->data;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

// Output shape for a leading-dim broadcast between a and b.
Shape broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " do not broadcast");
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  }
}

template <class Fwd, class Dfa, class Dfb>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa, Dfb dfb) {
  Shape out_shape = broadcast_shape(op, a, b);
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i % na], bd[i % nb]);
  return make_result(std::move(out_shape), std::move(out), op, {a, b}, [=](Node& self) {
    const auto& av = parent_data(self, 0);
    const auto& bv = parent_data(self, 1);
    auto ga = parent_grad(self, 0);
    auto gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i];
      if (!ga.empty()) ga[i % na] += g * dfa(av[i % na], bv[i % nb]);
      if (!gb.empty()) gb[i % nb] += g * dfb(av[i % na], bv[i % nb]);
    }
  });
}

template <class Fwd, class Df>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Df df) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  std::ranges::transform(xd, out.begin(), fwd);
  return make_result(x.shape(), std::move(out), op, {x}, [=](Node& self) {
    const auto& xv = parent_data(self, 0);
    auto gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.data[i]);
  });
}

// Copies elements through an index map: out[i] = x[map[i]], gx[map[i]] += g[i].
Tensor gather(const char* op, const Tensor& x, Shape out_shape,
              std::shared_ptr<const std::vector<std::size_t>> map) {
  const auto xd = x.data();
  std::vector<double> out(map->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[(*map)[i]];
  return make_result(std::move(out_shape), std::move(out), op, {x}, [map](Node& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += self.grad[i];
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  constexpr double inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw NumericError("sqrt of negative value " + std::to_string(v));
  }
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, "sum", {x}, [](Node& self) {
    auto gx = parent_grad(self, 0);
    for (double& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  return make_result({}, {s * inv_n}, "mean", {x}, [inv_n](Node& self) {
    auto gx = parent_grad(self, 0);
    for (double& g : gx) g += self.grad[0] * inv_n;
  });
}

Tensor l2_norm_lastaxis(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("l2_norm_lastaxis on a scalar");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const auto xd = x.data();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += xd[r * c + k] * xd[r * c + k];
    out[r] = std::sqrt(s);
  }
  return make_result(std::move(out_shape), std::move(out), "l2_norm", {x}, [c, rows](Node& self) {
    const auto& xv = parent_data(self, 0);
    auto gx = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double nrm = self.data[r];
      if (nrm == 0.0) continue;
      const double f = self.grad[r] / nrm;
      for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += f * xv[r * c + k];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto mismatch = [&] {
    return ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                      shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t n = b.shape().back();
  if (b.shape()[b.rank() - 2] != k) throw mismatch();

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  kernels::GemmArgs fwd;
  if (b.rank() == 2) {
    // Shared right operand: fold a's leading dims into rows.
    fwd.m = a.numel() / k;
  } else {
    if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                    b.shape().end() - 2) ||
        a.rank() != b.rank()) {
      throw mismatch();
    }
    fwd.batch = a.numel() / (m * k);
    fwd.m = m;
    fwd.stride_a = m * k;
    fwd.stride_b = k * n;
    fwd.stride_c = m * n;
  }
  fwd.n = n;
  fwd.k = k;

  std::vector<double> out(shape_numel(out_shape));
  kernels::gemm(a.data(), b.data(), out, fwd);

  return make_result(std::move(out_shape), std::move(out), "matmul", {a, b}, [fwd](Node& self) {
    const auto& av = parent_data(self, 0);
    const auto& bv = parent_data(self, 1);
    auto ga = parent_grad(self, 0);
    auto gb = parent_grad(self, 1);
    if (!ga.empty()) {
      // dA = G * B^T
      kernels::GemmArgs g = fwd;
      g.k = fwd.n;
      g.n = fwd.k;
      g.trans_b = true;
      g.accumulate = true;
      g.stride_a = fwd.stride_c;
      g.stride_b = fwd.stride_b;
      g.stride_c = fwd.stride_a;
      kernels::gemm(self.grad, bv, ga, g);
    }
    if (!gb.empty()) {
      // dB = A^T * G, summed over the batch when B is shared.
      kernels::GemmArgs g = fwd;
      g.m = fwd.k;
      g.k = fwd.m;
      g.n = fwd.n;
      g.trans_a = true;
      g.accumulate = true;
      g.stride_a = fwd.stride_a;
      g.stride_b = fwd.stride_c;
      g.stride_c = fwd.stride_b;
      kernels::gemm(av, self.grad, gb, g);
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const kernels::LineArgs l{prod(x.shape(), 0, axis), x.shape()[axis],
                            prod(x.shape(), axis + 1, x.rank())};
  std::vector<double> out(x.numel());
  kernels::softmax(x.data(), out, l);
  return make_result(x.shape(), std::move(out), "softmax", {x}, [l](Node& self) {
    kernels::softmax_backward(self.data, self.grad, parent_grad(self, 0), l);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || gamma.shape() != Shape{x.shape().back()} || beta.shape() != gamma.shape()) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                     shape_str(beta.shape()) + " do not match last axis of " +
                     shape_str(x.shape()));
  }
  const kernels::NormArgs args{x.numel() / x.shape().back(), x.shape().back(), eps};
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(args.rows);
  std::vector<double> out(x.numel());
  kernels::layer_norm(x.data(), gamma.data(), beta.data(), out, *xhat, *rstd, args);
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                     [args, xhat, rstd](Node& self) {
                       const auto& gv = parent_data(self, 1);
                       auto gx = parent_grad(self, 0);
                       auto ggamma = parent_grad(self, 1);
                       auto gbeta = parent_grad(self, 2);
                       if (!gx.empty()) {
                         kernels::layer_norm_backward(self.grad, *xhat, *rstd, gv, gx, args);
                       }
                       for (std::size_t r = 0; r < args.rows; ++r) {
                         for (std::size_t c = 0; c < args.cols; ++c) {
                           const double g = self.grad[r * args.cols + c];
                           if (!ggamma.empty()) ggamma[c] += g * (*xhat)[r * args.cols + c];
                           if (!gbeta.empty()) gbeta[c] += g;
                         }
                       }
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  std::vector<bool> used(r, false);
  bool valid = order.size() == r;
  for (std::size_t i = 0; valid && i < order.size(); ++i) {
    valid = order[i] < r && !used[order[i]];
    if (valid) used[order[i]] = true;
  }
  if (!valid) {
    std::string o;
    for (std::size_t v : order) o += (o.empty() ? "" : ",") + std::to_string(v);
    throw ShapeError("permute: (" + o + ") is not a permutation of the axes of " +
                     shape_str(x.shape()));
  }

  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[order[i]];
    step[i] = in_stride[order[i]];
  }

  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*map)[i] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += step[ax];
        break;
      }
      src -= step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return gather("permute", x, std::move(out_shape), std::move(map));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  check_axis("concat", xs.front(), axis);
  const Shape& ref = xs.front().shape();
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    bool ok = x.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || x.shape()[i] == ref[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(x.shape()) + " does not match " + shape_str(ref) +
                       " off axis " + std::to_string(axis));
    }
    out_shape[axis] += x.shape()[axis];
  }
  const std::size_t outer = prod(ref, 0, axis);
  const std::size_t inner = prod(ref, axis + 1, ref.size());
  std::vector<std::size_t> chunk;
  for (const auto& x : xs) chunk.push_back(x.shape()[axis] * inner);
  const std::size_t row = std::accumulate(chunk.begin(), chunk.end(), std::size_t{0});

  std::vector<double> out(outer * row);
  std::size_t off = 0;
  for (std::size_t p = 0; p < xs.size(); ++p) {
    const auto d = xs[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.begin() + static_cast<long>(o * chunk[p]), chunk[p],
                  out.begin() + static_cast<long>(o * row + off));
    }
    off += chunk[p];
  }
  return make_result(std::move(out_shape), std::move(out), "concat", xs,
                     [outer, row, chunk](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < chunk.size(); ++p) {
                         auto gx = parent_grad(self, p);
                         if (!gx.empty()) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < chunk[p]; ++i) {
                               gx[o * chunk[p] + i] += self.grad[o * row + off + i];
                             }
                           }
                         }
                         off += chunk[p];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis("slice", x, axis);
  if (length == 0 || start + length > x.shape()[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t outer = prod(x.shape(), 0, axis);
  const std::size_t inner = prod(x.shape(), axis + 1, x.rank());
  const std::size_t in_row = x.shape()[axis] * inner;
  const std::size_t out_row = length * inner;
  auto map = std::make_shared<std::vector<std::size_t>>(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < out_row; ++i) (*map)[o * out_row + i] = o * in_row + start * inner + i;
  }
  return gather("slice", x, std::move(out_shape), std::move(map));
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  check_axis("split", x, axis);
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x.shape()[axis]) {
    throw ShapeError("split: sizes do not add up to extent " + std::to_string(x.shape()[axis]) +
                     " of " + shape_str(x.shape()));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

Tensor framewise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.shape()[1] != x.shape()[0] ||
      bias.shape() != Shape{weight.shape()[0]}) {
    throw ShapeError("framewise_conv1d: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()) +
                     " do not conform");
  }
  const std::size_t f_out = weight.shape()[0];
  const std::size_t f_in = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  kernels::GemmArgs fwd;
  fwd.m = f_out;
  fwd.n = cols;
  fwd.k = f_in;
  std::vector<double> out(f_out * cols);
  kernels::gemm(weight.data(), x.data(), out, fwd);
  const auto bd = bias.data();
  for (std::size_t f = 0; f < f_out; ++f) {
    for (std::size_t c = 0; c < cols; ++c) out[f * cols + c] += bd[f];
  }
  return make_result({f_out, cols}, std::move(out), "framewise_conv1d", {x, weight, bias},
                     [f_out, f_in, cols](Node& self) {
                       const auto& xv = parent_data(self, 0);
                       const auto& wv = parent_data(self, 1);
                       auto gx = parent_grad(self, 0);
                       auto gw = parent_grad(self, 1);
                       auto gb = parent_grad(self, 2);
                       if (!gx.empty()) {
                         kernels::GemmArgs g;
                         g.m = f_in;
                         g.n = cols;
                         g.k = f_out;
                         g.trans_a = true;
                         g.accumulate = true;
                         kernels::gemm(wv, self.grad, gx, g);
                       }
                       if (!gw.empty()) {
                         kernels::GemmArgs g;
                         g.m = f_out;
                         g.n = f_in;
                         g.k = cols;
                         g.trans_b = true;
                         g.accumulate = true;
                         kernels::gemm(self.grad, xv, gw, g);
                       }
                       if (!gb.empty()) {
                         for (std::size_t f = 0; f < f_out; ++f) {
                           for (std::size_t c = 0; c < cols; ++c) gb[f] += self.grad[f * cols + c];
                         }
                       }
                     });
}

}  // namespace ff
