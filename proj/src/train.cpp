#include "fusionformer/train.hpp"

#include <cmath>
#include <exception>
#include <map>
#include <numeric>

#include "fusionformer/error.hpp"
#include "fusionformer/rng.hpp"

namespace ff {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(base_lr >= 0.0)) fail("base_lr must be >= 0");
  if (!(decay > 0.0 && decay <= 1.0)) fail("decay must lie in (0, 1]");
  if (decay_every == 0) fail("decay_every must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  loss.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs},
      {"base_lr", c.base_lr},
      {"decay", c.decay},
      {"decay_every", c.decay_every},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"lambda_m", c.loss.lambda_m},
      {"lambda_r", c.loss.lambda_r},
      {"flip_augment", c.flip_augment},
      {"grad_clip", c.grad_clip},
      {"max_steps", c.max_steps},
      {"checkpoint_every", c.checkpoint_every},
      {"refine_source", c.refine_source == RefineSource::input ? "input" : "gt"},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
  };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw FormatError("train", "expected an object");
  std::map<std::string, std::size_t*> counts{{"epochs", &c.epochs},
                                              {"decay_every", &c.decay_every},
                                              {"batch_size", &c.batch_size},
                                              {"max_steps", &c.max_steps},
                                              {"checkpoint_every", &c.checkpoint_every}};
  std::map<std::string, double*> reals{{"base_lr", &c.base_lr},     {"decay", &c.decay},
                                        {"lambda_m", &c.loss.lambda_m}, {"lambda_r", &c.loss.lambda_r},
                                        {"grad_clip", &c.grad_clip}, {"beta1", &c.beta1},
                                        {"beta2", &c.beta2},         {"adam_eps", &c.adam_eps}};
  for (const auto& [key, value] : j.items()) {
    const std::string field = "train." + key;
    if (auto it = counts.find(key); it != counts.end()) {
      if (!value.is_number_unsigned()) throw FormatError(field, "expected a non-negative integer");
      *it->second = value.get<std::size_t>();
    } else if (auto r = reals.find(key); r != reals.end()) {
      if (!value.is_number()) throw FormatError(field, "expected a number");
      *r->second = value.get<double>();
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) throw FormatError(field, "expected a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    } else if (key == "flip_augment") {
      if (!value.is_boolean()) throw FormatError(field, "expected true or false");
      c.flip_augment = value.get<bool>();
    } else if (key == "refine_source") {
      const std::string s = value.is_string() ? value.get<std::string>() : "";
      if (s == "input") {
        c.refine_source = RefineSource::input;
      } else if (s == "gt") {
        c.refine_source = RefineSource::gt;
      } else {
        throw FormatError(field, "expected \"input\" or \"gt\"");
      }
    } else {
      throw FormatError(field, "unknown key");
    }
  }
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.base_lr * std::pow(cfg.decay, static_cast<double>(epoch / cfg.decay_every));
}

OptimState make_optim_state(const std::vector<NamedTensor>& params, const TrainConfig& cfg) {
  OptimState s;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.eps = cfg.adam_eps;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_step(const std::vector<NamedTensor>& params, OptimState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("optimizer state does not match the parameter list");
  }
  for (const auto& [name, t] : params) {
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

Tensor clip_loss(const ModelParams& params, const ModelConfig& mcfg, const PoseClip& clip,
                 const TrainConfig& tcfg) {
  if (!clip.frames_3d) throw Error("training clip has no 3D ground truth");
  const Tensor& gt = *clip.frames_3d;
  Tensor reference;
  if (tcfg.refine_source == RefineSource::gt) reference = slice(gt, 2, 0, 2);
  const ForwardResult r =
      model_forward(clip.frames_2d, params, mcfg, reference.defined() ? &reference : nullptr);
  Tensor lm = loss_m(r.sequence, gt);
  Tensor lr;
  if (mcfg.refine_enabled) {
    lr = loss_r(r.center, reshape(slice(gt, 0, mcfg.center(), 1), {mcfg.joints, 3}));
  }
  return loss_total(lm, lr, tcfg.loss);
}

Pose predict_center(const ModelParams& params, const ModelConfig& mcfg, const Tensor& x2d) {
  NoGradGuard guard;
  return to_pose(model_forward(x2d, params, mcfg).center);
}

std::vector<Pose> predict_centers(const ModelParams& params, const ModelConfig& mcfg,
                                  const Dataset& ds, bool flip_ensemble) {
  const std::size_t n = ds.clips.size();
  std::vector<Pose> out(n);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const PoseClip& clip = ds.clips[i];
      Pose p = predict_center(params, mcfg, clip.frames_2d);
      if (flip_ensemble) {
        const Tensor mirrored = flip_joints(clip.frames_2d, ds.skeleton);
        const Tensor back = flip_joints(to_tensor(predict_center(params, mcfg, mirrored)), ds.skeleton);
        p = 0.5 * (p + to_pose(back));
      }
      out[i] = std::move(p);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

MetricReport evaluate(const ModelParams& params, const ModelConfig& mcfg, const Dataset& ds,
                      const EvalOptions& opt) {
  std::vector<Pose> gt;
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    const PoseClip& c = ds.clips[i];
    if (!c.frames_3d) {
      throw Error("clip " + std::to_string(i) + " has no 3D ground truth; cannot evaluate");
    }
    gt.push_back(to_pose(reshape(slice(*c.frames_3d, 0, mcfg.center(), 1), {mcfg.joints, 3})));
  }
  MetricOptions mo = opt.metrics;
  mo.root = ds.skeleton.root;
  return compute_report(predict_centers(params, mcfg, ds, opt.flip_ensemble), gt, mo);
}

GradCheckResult check_model_gradients(const ModelConfig& cfg, std::uint64_t seed, double h) {
  cfg.validate();
  const ModelParams params = init_params(cfg, seed);
  Rng rng(derive_seed(seed, 1));
  auto random_tensor = [&rng](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
  };
  PoseClip clip;
  clip.frames_2d = random_tensor({cfg.frames, cfg.joints, 2});
  clip.frames_3d = random_tensor({cfg.frames, cfg.joints, 3});
  const TrainConfig tcfg;
  return finite_diff_check([&] { return clip_loss(params, cfg, clip, tcfg); }, params.named(cfg), h);
}

namespace {

void clip_gradients(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (const auto& [name, t] : params) {
    Tensor h = t;
    for (double& g : h.mutable_grad()) g *= f;
  }
}

}  // namespace

std::vector<EpochLog> train(TrainSession& session, const ModelConfig& mcfg, const Dataset& data,
                            const TrainConfig& cfg, const Dataset* val,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  mcfg.validate();
  cfg.validate();
  if (data.clips.empty()) throw Error("training set is empty");
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    const PoseClip& c = data.clips[i];
    if (c.frames() != mcfg.frames || c.joints() != mcfg.joints) {
      throw ShapeError("training clip " + std::to_string(i) + " is " +
                       shape_str(c.frames_2d.shape()) + ", model expects " +
                       std::to_string(mcfg.frames) + " frames x " + std::to_string(mcfg.joints) +
                       " joints");
    }
  }

  const std::vector<NamedTensor> params = session.params.named(mcfg);
  if (session.optim.m.empty()) session.optim = make_optim_state(params, cfg);

  std::vector<PoseClip> mirrored;
  if (cfg.flip_augment) {
    for (const auto& c : data.clips) mirrored.push_back(flip_clip(c, data.skeleton));
  }
  const std::size_t n = data.clips.size();
  const std::size_t total = n + mirrored.size();

  std::vector<EpochLog> log;
  for (std::size_t epoch = session.next_epoch; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps && session.optim.step >= cfg.max_steps) break;
    const double lr = lr_at(epoch, cfg);
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < total; start += cfg.batch_size) {
      if (cfg.max_steps && session.optim.step >= cfg.max_steps) break;
      const std::size_t end = std::min(total, start + cfg.batch_size);
      for (auto& [name, t] : params) {
        Tensor h = t;
        h.zero_grad();
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t item = order[b];
        const PoseClip& clip = item < n ? data.clips[item] : mirrored[item - n];
        Tensor loss = clip_loss(session.params, mcfg, clip, cfg);
        if (!std::isfinite(loss.item())) {
          throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(start / cfg.batch_size) + " (sample " +
                             std::to_string(item) + ")");
        }
        scale(loss, inv).backward();
        loss_sum += loss.item();
        ++seen;
      }
      if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
      adam_step(params, session.optim, lr);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    EvalOptions eo;
    entry.val_mpjpe = evaluate(session.params, mcfg, val ? *val : data, eo).mpjpe;
    entry.steps = session.optim.step;
    session.next_epoch = epoch + 1;
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

}  // namespace ff
