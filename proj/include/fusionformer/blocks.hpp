#pragma once

// Transformer building blocks: scaled dot-product attention, multi-head
// attention, the pre-norm encoder block and learnable positional tables.
//
// Token tensors are (..., tokens, width). Leading dims are independent
// sequences processed in one batch.

#include <cstddef>
#include <string>
#include <vector>

#include "fusionformer/gradcheck.hpp"
#include "fusionformer/rng.hpp"
#include "fusionformer/tensor.hpp"

namespace ff {

// y = x * weight + bias, weight stored in_dim x out_dim.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

// Per-head projections are the column groups of the model_dim x model_dim
// query/key/value weights: head h owns columns [h*head_dim, (h+1)*head_dim).
struct AttentionParams {
  std::size_t n_heads = 1;
  Linear query, key, value, output;

  std::size_t model_dim() const { return query.weight.dim(0); }
  std::size_t head_dim() const { return model_dim() / n_heads; }
};

struct BlockParams {
  AttentionParams attention;
  LayerNormParams norm1, norm2, norm_final;
  Linear fc1, fc2;
};

// One learnable row per token position.
struct PositionalEncoding {
  Tensor table;
};

struct AttentionResult {
  Tensor output;
  Tensor weights;  // (..., queries, keys), rows sum to 1
};

// Initialisers: weights uniform(+-1/sqrt(fan_in)), biases 0, LN affine (1, 0),
// positional tables normal(0, 0.02).
Linear make_linear(Rng& rng, std::size_t in_dim, std::size_t out_dim);
LayerNormParams make_layer_norm(std::size_t dim);
AttentionParams make_attention(Rng& rng, std::size_t dim, std::size_t n_heads);
BlockParams make_block(Rng& rng, std::size_t dim, std::size_t n_heads, std::size_t mlp_ratio);
PositionalEncoding make_positional(Rng& rng, std::size_t rows, std::size_t dim);

// Appends "<prefix>.<field>" entries in a fixed order.
void collect(const std::string& prefix, const Linear& p, std::vector<NamedTensor>& out);
void collect(const std::string& prefix, const LayerNormParams& p, std::vector<NamedTensor>& out);
void collect(const std::string& prefix, const AttentionParams& p, std::vector<NamedTensor>& out);
void collect(const std::string& prefix, const BlockParams& p, std::vector<NamedTensor>& out);

std::size_t block_param_count(std::size_t dim, std::size_t mlp_ratio);

Tensor linear(const Tensor& x, const Linear& p);

// softmax(q k^T / sqrt(d_k)) v with d_k = q's last extent.
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Output projection of the concatenated per-head attention outputs.
// weights are (..., heads, tokens, tokens).
AttentionResult multi_head_attention(const Tensor& x, const AttentionParams& p);

// h  = MHA(LN1(x)) + x
// h' = MLP(LN2(h)) + h
// y  = LN_final(h')
// When `attention_weights` is non-null it receives the block's attention map.
Tensor encoder_block(const Tensor& x, const BlockParams& p, Tensor* attention_weights = nullptr);

// x * proj + bias + pe[0..tokens).
Tensor embed(const Tensor& x, const Linear& proj, const PositionalEncoding& pe);
Tensor add_positional(const Tensor& x, const PositionalEncoding& pe);

}  // namespace ff
