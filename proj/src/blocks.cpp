#include "fusionformer/blocks.hpp"

#include <cmath>
#include <numeric>

#include "fusionformer/error.hpp"

namespace ff {

Linear make_linear(Rng& rng, std::size_t in_dim, std::size_t out_dim) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  std::vector<double> w(in_dim * out_dim);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return {Tensor::from({in_dim, out_dim}, std::move(w), true), Tensor::zeros({out_dim}, true)};
}

LayerNormParams make_layer_norm(std::size_t dim) {
  return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

AttentionParams make_attention(Rng& rng, std::size_t dim, std::size_t n_heads) {
  if (n_heads == 0 || dim % n_heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  AttentionParams p;
  p.n_heads = n_heads;
  p.query = make_linear(rng, dim, dim);
  p.key = make_linear(rng, dim, dim);
  p.value = make_linear(rng, dim, dim);
  p.output = make_linear(rng, dim, dim);
  return p;
}

BlockParams make_block(Rng& rng, std::size_t dim, std::size_t n_heads, std::size_t mlp_ratio) {
  BlockParams p;
  p.norm1 = make_layer_norm(dim);
  p.attention = make_attention(rng, dim, n_heads);
  p.norm2 = make_layer_norm(dim);
  p.fc1 = make_linear(rng, dim, dim * mlp_ratio);
  p.fc2 = make_linear(rng, dim * mlp_ratio, dim);
  p.norm_final = make_layer_norm(dim);
  return p;
}

PositionalEncoding make_positional(Rng& rng, std::size_t rows, std::size_t dim) {
  std::vector<double> v(rows * dim);
  for (double& x : v) x = rng.normal(0.0, 0.02);
  return {Tensor::from({rows, dim}, std::move(v), true)};
}

void collect(const std::string& prefix, const Linear& p, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(const std::string& prefix, const LayerNormParams& p, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

void collect(const std::string& prefix, const AttentionParams& p, std::vector<NamedTensor>& out) {
  collect(prefix + ".query", p.query, out);
  collect(prefix + ".key", p.key, out);
  collect(prefix + ".value", p.value, out);
  collect(prefix + ".output", p.output, out);
}

void collect(const std::string& prefix, const BlockParams& p, std::vector<NamedTensor>& out) {
  collect(prefix + ".norm1", p.norm1, out);
  collect(prefix + ".attention", p.attention, out);
  collect(prefix + ".norm2", p.norm2, out);
  collect(prefix + ".fc1", p.fc1, out);
  collect(prefix + ".fc2", p.fc2, out);
  collect(prefix + ".norm_final", p.norm_final, out);
}

std::size_t block_param_count(std::size_t dim, std::size_t mlp_ratio) {
  const std::size_t hidden = dim * mlp_ratio;
  const std::size_t norms = 3 * 2 * dim;
  const std::size_t attn = 4 * (dim * dim + dim);
  const std::size_t mlp = dim * hidden + hidden + hidden * dim + dim;
  return norms + attn + mlp;
}

Tensor linear(const Tensor& x, const Linear& p) { return add(matmul(x, p.weight), p.bias); }

namespace {

// Swaps the last two axes.
Tensor transpose_last(const Tensor& x) {
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

// (..., N, C) -> (..., H, N, C/H)
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t r = x.rank();
  Shape s = x.shape();
  const std::size_t c = s.back();
  s.back() = heads;
  s.push_back(c / heads);
  std::vector<std::size_t> order(r + 1);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[r - 2], order[r - 1]);
  return permute(reshape(x, s), order);
}

// (..., H, N, d) -> (..., N, H*d)
Tensor merge_heads(const Tensor& x) {
  const std::size_t r = x.rank();
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[r - 3], order[r - 2]);
  Tensor y = permute(x, order);
  Shape s(y.shape().begin(), y.shape().end() - 2);
  s.push_back(x.shape()[r - 3] * x.shape()[r - 1]);
  return reshape(y, s);
}

}  // namespace

AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank() ||
      q.shape().back() != k.shape().back() || k.shape()[k.rank() - 2] != v.shape()[v.rank() - 2]) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()) + " do not conform");
  }
  const double d_k = static_cast<double>(q.shape().back());
  Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(d_k));
  Tensor weights = softmax(scores, scores.rank() - 1);
  return {matmul(weights, v), weights};
}

AttentionResult multi_head_attention(const Tensor& x, const AttentionParams& p) {
  if (x.rank() < 2 || x.shape().back() != p.model_dim()) {
    throw ShapeError("multi_head_attention: input " + shape_str(x.shape()) +
                     " does not match model width " + std::to_string(p.model_dim()));
  }
  Tensor q = split_heads(linear(x, p.query), p.n_heads);
  Tensor k = split_heads(linear(x, p.key), p.n_heads);
  Tensor v = split_heads(linear(x, p.value), p.n_heads);
  AttentionResult heads = attention(q, k, v);
  return {linear(merge_heads(heads.output), p.output), heads.weights};
}

Tensor encoder_block(const Tensor& x, const BlockParams& p, Tensor* attention_weights) {
  AttentionResult a = multi_head_attention(layer_norm(x, p.norm1.gamma, p.norm1.beta), p.attention);
  if (attention_weights) *attention_weights = a.weights;
  Tensor h = add(a.output, x);
  Tensor m = linear(gelu(linear(layer_norm(h, p.norm2.gamma, p.norm2.beta), p.fc1)), p.fc2);
  Tensor h2 = add(m, h);
  return layer_norm(h2, p.norm_final.gamma, p.norm_final.beta);
}

Tensor add_positional(const Tensor& x, const PositionalEncoding& pe) {
  if (x.rank() < 2) throw ShapeError("positional encoding needs (..., tokens, width) input");
  const std::size_t tokens = x.shape()[x.rank() - 2];
  if (tokens > pe.table.dim(0) || x.shape().back() != pe.table.dim(1)) {
    throw ShapeError("positional table " + shape_str(pe.table.shape()) + " cannot cover input " +
                     shape_str(x.shape()));
  }
  return add(x, tokens == pe.table.dim(0) ? pe.table : slice(pe.table, 0, 0, tokens));
}

Tensor embed(const Tensor& x, const Linear& proj, const PositionalEncoding& pe) {
  return add_positional(linear(x, proj), pe);
}

}  // namespace ff
