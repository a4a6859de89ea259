#pragma once

// Fusionformer: a global branch (spatial then temporal attention over whole
// frames), a local branch (self-trajectory then cross-trajectory attention
// over per-joint trajectories), a frame-axis fusion head and a pose
// refinement network blending the predicted centre pose with a
// (reference 2D, predicted depth) composite.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusionformer/blocks.hpp"
#include "fusionformer/gradcheck.hpp"
#include "fusionformer/tensor.hpp"

namespace ff {

enum class FramePolicy {
  standard,  // T in {3, 5, 7, 9}
  any_odd,
};

struct ModelConfig {
  std::size_t frames = 9;
  std::size_t joints = 17;
  std::size_t dim = 32;
  std::size_t heads = 4;      // spatial, temporal and self-trajectory encoders
  std::size_t cte_heads = 2;  // cross-trajectory encoder, token width frames*dim
  std::size_t spatial_layers = 4;
  std::size_t temporal_layers = 4;
  std::size_t ste_layers = 4;
  std::size_t cte_layers = 4;
  std::size_t mlp_ratio = 2;
  std::size_t refine_hidden = 32;
  bool refine_enabled = true;
  // false drops the trajectory branch; the head then sees zeros in its place
  // (the global-only ablation).
  bool lim_enabled = true;
  // Trajectory branch reuses the spatial embedding instead of its own.
  bool share_embedding = false;
  FramePolicy frame_policy = FramePolicy::standard;

  std::size_t center() const { return frames / 2; }
  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelParams {
  Linear spatial_embed;
  PositionalEncoding spatial_pos;
  std::vector<BlockParams> spatial_blocks;
  PositionalEncoding temporal_pos;  // frames x (joints*dim)
  std::vector<BlockParams> temporal_blocks;

  Linear traj_embed;  // aliases spatial_embed when shared
  PositionalEncoding ste_pos;  // frames x dim
  std::vector<BlockParams> ste_blocks;
  PositionalEncoding cte_pos;  // joints x (frames*dim)
  std::vector<BlockParams> cte_blocks;

  Linear head_conv;  // weight frames x 2*frames, bias frames
  LayerNormParams head_norm;
  Linear head_proj;  // dim -> 3

  Linear refine_fc1;  // 6*joints -> refine_hidden
  Linear refine_fc2;  // refine_hidden -> 2

  // Every learnable tensor once, in a fixed order.
  std::vector<NamedTensor> named(const ModelConfig& cfg) const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
// Rebuilds the structure from a named list (e.g. a checkpoint). Names and
// shapes must match init_params(cfg) exactly.
ModelParams params_from_named(const ModelConfig& cfg, const std::vector<NamedTensor>& named);

// Exact learnable scalar count.
std::size_t param_count(const ModelConfig& cfg);

struct AttentionMap {
  std::string encoder;  // "spatial", "temporal", "ste", "cte"
  std::size_t layer = 0;
  Tensor weights;  // (..., heads, queries, keys)
};

struct ForwardTrace {
  std::vector<AttentionMap> attention;
  Tensor global_features;  // frames x joints x dim
  Tensor local_features;   // frames x joints x dim (undefined when LIM is off)

  const AttentionMap* find(const std::string& encoder, std::size_t layer) const;
};

struct ForwardResult {
  Tensor sequence;  // frames x joints x 3
  Tensor center;    // joints x 3
  ForwardTrace trace;
};

Tensor gim_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace = nullptr);

// (frames, joints, C) <-> (joints, frames, C); the map is its own inverse.
Tensor reconstruct_trajectories(const Tensor& x);

Tensor ste_forward(const Tensor& traj, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace = nullptr);
Tensor cte_forward(const Tensor& traj, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace = nullptr);
Tensor lim_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace = nullptr);

Tensor regression_head(const Tensor& global_features, const Tensor& local_features,
                       const ModelParams& p, const ModelConfig& cfg);

// Refined centre pose (joints x 3). `reference2d` is frames x joints x 2; its
// centre frame supplies the x, y of the composite candidate.
Tensor pose_refine(const Tensor& sequence, const Tensor& reference2d, const ModelParams& p,
                   const ModelConfig& cfg);

// `reference2d` defaults to x2d itself.
ForwardResult model_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                            const Tensor* reference2d = nullptr);

}  // namespace ff
