#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>

#include "fusionformer/data.hpp"
#include "fusionformer/metrics.hpp"
#include "fusionformer/model.hpp"

namespace ff {

// Where the refinement network takes the x, y of its composite candidate.
enum class RefineSource {
  input,  // the model's own 2D input
  gt,     // ground-truth 2D (x, y of frames_3d) when the sample has it
};

struct TrainConfig {
  std::size_t epochs = 40;
  double base_lr = 1e-3;
  double decay = 0.95;
  std::size_t decay_every = 5;
  std::size_t batch_size = 1;  // clips accumulated per optimiser step
  std::uint64_t seed = 0;
  LossWeights loss;
  bool flip_augment = false;
  double grad_clip = 0.0;      // global-norm clip, 0 = off
  std::size_t max_steps = 0;   // stop after this many optimiser steps, 0 = no cap
  std::size_t checkpoint_every = 5;
  RefineSource refine_source = RefineSource::input;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// base_lr * decay^floor(epoch / decay_every)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct OptimState {
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> v;  // second moments
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimState make_optim_state(const std::vector<NamedTensor>& params, const TrainConfig& cfg);

// One bias-corrected Adam update from the parameters' accumulated gradients.
// Throws NumericError naming the first parameter with a non-finite gradient.
void adam_step(const std::vector<NamedTensor>& params, OptimState& state, double lr);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mpjpe = 0.0;
  std::size_t steps = 0;  // cumulative optimiser steps at the end of the epoch
};

struct EvalOptions {
  bool flip_ensemble = false;
  MetricOptions metrics;
};

// Loss of one window (forward + loss_total); graph attached for backward.
Tensor clip_loss(const ModelParams& params, const ModelConfig& mcfg, const PoseClip& clip,
                 const TrainConfig& tcfg);

// Refined (or centre-frame) prediction for one window, no graph.
Pose predict_center(const ModelParams& params, const ModelConfig& mcfg, const Tensor& x2d);

// Centre-frame predictions of every window in `ds`; ds.skeleton provides the
// flip mapping for the ensemble. Clips run in parallel, results in order.
std::vector<Pose> predict_centers(const ModelParams& params, const ModelConfig& mcfg,
                                  const Dataset& ds, bool flip_ensemble);

// Throws when a clip lacks 3D ground truth.
MetricReport evaluate(const ModelParams& params, const ModelConfig& mcfg, const Dataset& ds,
                      const EvalOptions& opt);

// End-to-end check of the training loss (refinement term included) against
// central differences over every model parameter, on a random window.
GradCheckResult check_model_gradients(const ModelConfig& cfg, std::uint64_t seed, double h);

struct TrainSession {
  ModelParams params;
  OptimState optim;
  std::size_t next_epoch = 0;
};

// Trains from session.next_epoch up to cfg.epochs (or cfg.max_steps). Every
// epoch reshuffles with a stream derived from (seed, epoch), so resuming from
// a saved session reproduces an uninterrupted run. `val` falls back to the
// training set when null.
std::vector<EpochLog> train(TrainSession& session, const ModelConfig& mcfg, const Dataset& data,
                            const TrainConfig& cfg, const Dataset* val = nullptr,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace ff
