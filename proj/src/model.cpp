#include "fusionformer/model.hpp"

#include <map>

#include "fusionformer/error.hpp"
#include "fusionformer/rng.hpp"

namespace ff {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (frames % 2 == 0) fail("frames must be odd, got " + std::to_string(frames));
  if (frame_policy == FramePolicy::standard && (frames < 3 || frames > 9)) {
    fail("frames must be one of 3, 5, 7, 9 under the standard policy, got " +
         std::to_string(frames));
  }
  if (joints == 0) fail("joints must be positive");
  if (dim == 0) fail("dim must be positive");
  if (heads == 0 || dim % heads != 0) {
    fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (cte_heads == 0 || (frames * dim) % cte_heads != 0) {
    fail("frames*dim " + std::to_string(frames * dim) + " is not divisible by cte_heads " +
         std::to_string(cte_heads));
  }
  if (spatial_layers == 0 || temporal_layers == 0 || ste_layers == 0 || cte_layers == 0) {
    fail("every encoder needs at least one layer");
  }
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (refine_hidden == 0) fail("refine_hidden must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"frames", c.frames},
      {"joints", c.joints},
      {"dim", c.dim},
      {"heads", c.heads},
      {"cte_heads", c.cte_heads},
      {"spatial_layers", c.spatial_layers},
      {"temporal_layers", c.temporal_layers},
      {"ste_layers", c.ste_layers},
      {"cte_layers", c.cte_layers},
      {"mlp_ratio", c.mlp_ratio},
      {"refine_hidden", c.refine_hidden},
      {"refine_enabled", c.refine_enabled},
      {"lim_enabled", c.lim_enabled},
      {"share_embedding", c.share_embedding},
      {"frame_policy", c.frame_policy == FramePolicy::standard ? "standard" : "any_odd"},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw FormatError("model", "expected an object");
  std::map<std::string, std::size_t*> size_fields{
      {"frames", &c.frames},
      {"joints", &c.joints},
      {"dim", &c.dim},
      {"heads", &c.heads},
      {"cte_heads", &c.cte_heads},
      {"spatial_layers", &c.spatial_layers},
      {"temporal_layers", &c.temporal_layers},
      {"ste_layers", &c.ste_layers},
      {"cte_layers", &c.cte_layers},
      {"mlp_ratio", &c.mlp_ratio},
      {"refine_hidden", &c.refine_hidden},
  };
  std::map<std::string, bool*> flags{
      {"refine_enabled", &c.refine_enabled},
      {"lim_enabled", &c.lim_enabled},
      {"share_embedding", &c.share_embedding},
  };
  for (const auto& [key, value] : j.items()) {
    const std::string field = "model." + key;
    if (auto it = size_fields.find(key); it != size_fields.end()) {
      if (!value.is_number_unsigned()) throw FormatError(field, "expected a non-negative integer");
      *it->second = value.get<std::size_t>();
    } else if (auto fl = flags.find(key); fl != flags.end()) {
      if (!value.is_boolean()) throw FormatError(field, "expected true or false");
      *fl->second = value.get<bool>();
    } else if (key == "frame_policy") {
      const std::string s = value.is_string() ? value.get<std::string>() : "";
      if (s == "standard") {
        c.frame_policy = FramePolicy::standard;
      } else if (s == "any_odd") {
        c.frame_policy = FramePolicy::any_odd;
      } else {
        throw FormatError(field, "expected \"standard\" or \"any_odd\"");
      }
    } else {
      throw FormatError(field, "unknown key");
    }
  }
}

// ---- parameters -------------------------------------------------------------

namespace {

std::vector<BlockParams> make_stack(Rng& rng, std::size_t layers, std::size_t dim,
                                    std::size_t heads, std::size_t mlp_ratio) {
  std::vector<BlockParams> out;
  for (std::size_t l = 0; l < layers; ++l) out.push_back(make_block(rng, dim, heads, mlp_ratio));
  return out;
}

void collect_stack(const std::string& prefix, const std::vector<BlockParams>& blocks,
                   std::vector<NamedTensor>& out) {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    collect(prefix + "." + std::to_string(l), blocks[l], out);
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t T = cfg.frames, J = cfg.joints, D = cfg.dim;
  ModelParams p;
  p.spatial_embed = make_linear(rng, 2, D);
  p.spatial_pos = make_positional(rng, J, D);
  p.spatial_blocks = make_stack(rng, cfg.spatial_layers, D, cfg.heads, cfg.mlp_ratio);
  p.temporal_pos = make_positional(rng, T, J * D);
  p.temporal_blocks = make_stack(rng, cfg.temporal_layers, J * D, cfg.heads, cfg.mlp_ratio);
  if (cfg.lim_enabled) {
    p.traj_embed = cfg.share_embedding ? p.spatial_embed : make_linear(rng, 2, D);
    p.ste_pos = make_positional(rng, T, D);
    p.ste_blocks = make_stack(rng, cfg.ste_layers, D, cfg.heads, cfg.mlp_ratio);
    p.cte_pos = make_positional(rng, J, T * D);
    p.cte_blocks = make_stack(rng, cfg.cte_layers, T * D, cfg.cte_heads, cfg.mlp_ratio);
  }
  p.head_conv = make_linear(rng, 2 * T, T);
  // make_linear stores in x out; the frame conv wants out x in.
  p.head_conv.weight = permute(p.head_conv.weight, {1, 0}).detach(true);
  p.head_norm = make_layer_norm(D);
  p.head_proj = make_linear(rng, D, 3);
  if (cfg.refine_enabled) {
    p.refine_fc1 = make_linear(rng, 6 * J, cfg.refine_hidden);
    p.refine_fc2 = make_linear(rng, cfg.refine_hidden, 2);
  }
  return p;
}

std::vector<NamedTensor> ModelParams::named(const ModelConfig& cfg) const {
  std::vector<NamedTensor> out;
  collect("gim.spatial_embed", spatial_embed, out);
  out.emplace_back("gim.spatial_pos", spatial_pos.table);
  collect_stack("gim.spatial", spatial_blocks, out);
  out.emplace_back("gim.temporal_pos", temporal_pos.table);
  collect_stack("gim.temporal", temporal_blocks, out);
  if (cfg.lim_enabled) {
    if (!cfg.share_embedding) collect("lim.traj_embed", traj_embed, out);
    out.emplace_back("lim.ste_pos", ste_pos.table);
    collect_stack("lim.ste", ste_blocks, out);
    out.emplace_back("lim.cte_pos", cte_pos.table);
    collect_stack("lim.cte", cte_blocks, out);
  }
  collect("head.conv", head_conv, out);
  collect("head.norm", head_norm, out);
  collect("head.proj", head_proj, out);
  if (cfg.refine_enabled) {
    collect("refine.fc1", refine_fc1, out);
    collect("refine.fc2", refine_fc2, out);
  }
  return out;
}

ModelParams params_from_named(const ModelConfig& cfg, const std::vector<NamedTensor>& named) {
  // Build a template with the right structure, then swap in the given tensors.
  ModelParams p = init_params(cfg, 0);
  auto slots = p.named(cfg);
  if (slots.size() != named.size()) {
    throw CheckpointError("expected " + std::to_string(slots.size()) + " parameter tensors, got " +
                          std::to_string(named.size()));
  }
  std::map<std::string, Tensor> given;
  for (const auto& [name, t] : named) given.emplace(name, t);
  for (auto& [name, slot] : slots) {
    auto it = given.find(name);
    if (it == given.end()) throw CheckpointError("missing parameter '" + name + "'");
    if (it->second.shape() != slot.shape()) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(slot.shape()));
    }
    std::ranges::copy(it->second.data(), slot.mutable_data().begin());
  }
  return p;
}

std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t T = cfg.frames, J = cfg.joints, D = cfg.dim, r = cfg.mlp_ratio;
  const std::size_t embed = 2 * D + D;
  std::size_t n = embed + J * D + cfg.spatial_layers * block_param_count(D, r);
  n += T * J * D + cfg.temporal_layers * block_param_count(J * D, r);
  if (cfg.lim_enabled) {
    if (!cfg.share_embedding) n += embed;
    n += T * D + cfg.ste_layers * block_param_count(D, r);
    n += J * T * D + cfg.cte_layers * block_param_count(T * D, r);
  }
  n += T * 2 * T + T;  // frame conv
  n += 2 * D;          // head norm
  n += D * 3 + 3;      // head projection
  if (cfg.refine_enabled) {
    const std::size_t h = cfg.refine_hidden;
    n += 6 * J * h + h + h * 2 + 2;
  }
  return n;
}

// ---- forward ----------------------------------------------------------------

const AttentionMap* ForwardTrace::find(const std::string& encoder, std::size_t layer) const {
  for (const auto& m : attention) {
    if (m.encoder == encoder && m.layer == layer) return &m;
  }
  return nullptr;
}

namespace {

Tensor run_stack(Tensor x, const std::vector<BlockParams>& blocks, const char* name,
                 ForwardTrace* trace) {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    Tensor weights;
    x = encoder_block(x, blocks[l], trace ? &weights : nullptr);
    if (trace) trace->attention.push_back({name, l, weights});
  }
  return x;
}

void expect_shape(const char* what, const Tensor& x, const Shape& want) {
  if (x.shape() != want) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(want) + ", got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Tensor gim_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace) {
  const std::size_t T = cfg.frames, J = cfg.joints, D = cfg.dim;
  expect_shape("gim_forward input", x2d, {T, J, 2});
  // Spatial stage: per frame, J joint tokens of width D.
  Tensor x = embed(x2d, p.spatial_embed, p.spatial_pos);
  x = run_stack(x, p.spatial_blocks, "spatial", trace);
  // Temporal stage: T whole-body tokens of width J*D.
  x = add_positional(reshape(x, {T, J * D}), p.temporal_pos);
  x = run_stack(x, p.temporal_blocks, "temporal", trace);
  return reshape(x, {T, J, D});
}

Tensor reconstruct_trajectories(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("reconstruct_trajectories: rank-3 input required, got " +
                                      shape_str(x.shape()));
  return permute(x, {1, 0, 2});
}

Tensor ste_forward(const Tensor& traj, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace) {
  expect_shape("ste_forward input", traj, {cfg.joints, cfg.frames, cfg.dim});
  // Each joint is an independent batch entry: T tokens of width D.
  return run_stack(add_positional(traj, p.ste_pos), p.ste_blocks, "ste", trace);
}

Tensor cte_forward(const Tensor& traj, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace) {
  const std::size_t T = cfg.frames, J = cfg.joints, D = cfg.dim;
  expect_shape("cte_forward input", traj, {J, T, D});
  if ((T * D) % cfg.cte_heads != 0) {
    throw ConfigError("cte token width " + std::to_string(T * D) + " not divisible by " +
                      std::to_string(cfg.cte_heads) + " heads");
  }
  // Each whole trajectory is one token of width T*D.
  Tensor x = add_positional(reshape(traj, {J, T * D}), p.cte_pos);
  x = run_stack(x, p.cte_blocks, "cte", trace);
  return reshape(x, {J, T, D});
}

Tensor lim_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                   ForwardTrace* trace) {
  expect_shape("lim_forward input", x2d, {cfg.frames, cfg.joints, 2});
  Tensor traj = linear(reconstruct_trajectories(x2d), p.traj_embed);
  traj = ste_forward(traj, p, cfg, trace);
  traj = cte_forward(traj, p, cfg, trace);
  return reconstruct_trajectories(traj);
}

Tensor regression_head(const Tensor& global_features, const Tensor& local_features,
                       const ModelParams& p, const ModelConfig& cfg) {
  const std::size_t T = cfg.frames, J = cfg.joints, D = cfg.dim;
  expect_shape("regression_head global branch", global_features, {T, J, D});
  expect_shape("regression_head local branch", local_features, {T, J, D});
  Tensor stacked = concat({reshape(global_features, {T, J * D}), reshape(local_features, {T, J * D})}, 0);
  Tensor fused = reshape(framewise_conv1d(stacked, p.head_conv.weight, p.head_conv.bias), {T, J, D});
  Tensor normed = layer_norm(fused, p.head_norm.gamma, p.head_norm.beta);
  return linear(normed, p.head_proj);
}

Tensor pose_refine(const Tensor& sequence, const Tensor& reference2d, const ModelParams& p,
                   const ModelConfig& cfg) {
  const std::size_t T = cfg.frames, J = cfg.joints, c = cfg.center();
  if (!cfg.refine_enabled) throw ConfigError("pose_refine called with refinement disabled");
  if (!reference2d.defined()) throw ShapeError("pose_refine: missing reference 2D pose");
  expect_shape("pose_refine prediction", sequence, {T, J, 3});
  expect_shape("pose_refine reference", reference2d, {T, J, 2});

  Tensor a = reshape(slice(sequence, 0, c, 1), {J, 3});
  Tensor ref = reshape(slice(reference2d, 0, c, 1), {J, 2});
  Tensor b = concat({ref, slice(a, 1, 2, 1)}, 1);
  Tensor both = concat({reshape(a, {1, 3 * J}), reshape(b, {1, 3 * J})}, 1);
  Tensor logits = linear(gelu(linear(both, p.refine_fc1)), p.refine_fc2);
  Tensor conf = softmax(logits, 1);
  Tensor ca = reshape(slice(conf, 1, 0, 1), {});
  Tensor cb = reshape(slice(conf, 1, 1, 1), {});
  return add(mul(a, ca), mul(b, cb));
}

ForwardResult model_forward(const Tensor& x2d, const ModelParams& p, const ModelConfig& cfg,
                            const Tensor* reference2d) {
  cfg.validate();
  ForwardResult r;
  r.trace.global_features = gim_forward(x2d, p, cfg, &r.trace);
  Tensor local;
  if (cfg.lim_enabled) {
    local = lim_forward(x2d, p, cfg, &r.trace);
    r.trace.local_features = local;
  } else {
    local = Tensor::zeros({cfg.frames, cfg.joints, cfg.dim});
  }
  r.sequence = regression_head(r.trace.global_features, local, p, cfg);
  if (cfg.refine_enabled) {
    r.center = pose_refine(r.sequence, reference2d ? *reference2d : x2d, p, cfg);
  } else {
    r.center = reshape(slice(r.sequence, 0, cfg.center(), 1), {cfg.joints, 3});
  }
  return r;
}

}  // namespace ff
