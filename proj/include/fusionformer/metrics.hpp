#pragma once

// Training losses and pose evaluation metrics.

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fusionformer/tensor.hpp"

namespace ff {

struct LossWeights {
  double lambda_m = 1.0;  // all-frame loss
  double lambda_r = 1.0;  // refined centre-frame loss
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

// Mean over frames and joints of the per-joint Euclidean error. (T, J, 3).
Tensor loss_m(const Tensor& pred_seq, const Tensor& gt_seq);
// Mean per-joint Euclidean error of the centre pose. (J, 3).
Tensor loss_r(const Tensor& pred_center, const Tensor& gt_center);
// lambda_m * lm + lambda_r * lr; pass an undefined `lr` when refinement is off.
Tensor loss_total(const Tensor& lm, const Tensor& lr, const LossWeights& w);

// One pose, joints x 3.
using Pose = Eigen::Matrix<double, Eigen::Dynamic, 3>;

Pose to_pose(const Tensor& t);  // (J, 3) tensor
Tensor to_tensor(const Pose& p);

// Root-relative mean per-joint position error.
double mpjpe(const Pose& pred, const Pose& gt, std::size_t root);

struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::RowVector3d translation = Eigen::RowVector3d::Zero();

  Pose apply(const Pose& p) const;
};

struct Alignment {
  Pose aligned;
  Similarity transform;
};

// Least-squares similarity (s, R, t) taking pred onto gt with R a proper
// rotation. Throws NumericError when either centred pose has rank < 2.
Alignment procrustes_align(const Pose& pred, const Pose& gt);

// Mean per-joint error after procrustes_align.
double p_mpjpe(const Pose& pred, const Pose& gt);

// Percentage of non-root joints whose root-relative error is strictly below
// `threshold` (same length unit as the poses). The root is excluded because
// its root-relative error is zero by construction.
double pck(const std::vector<Pose>& pred, const std::vector<Pose>& gt, double threshold,
           std::size_t root);

// Mean PCK over thresholds 5, 10, ..., 150 mm, divided by 100.
// `mm_per_unit` converts pose units to millimetres (1000 for metres).
double auc(const std::vector<Pose>& pred, const std::vector<Pose>& gt, std::size_t root,
           double mm_per_unit);

struct MetricOptions {
  std::size_t root = 0;
  double pck_threshold_mm = 150.0;
  double mm_per_unit = 1000.0;
};

struct ClipMetrics {
  double mpjpe = 0.0;
  double p_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  bool operator==(const ClipMetrics&) const = default;
};

// mpjpe / p_mpjpe in pose units, pck in [0, 100], auc in [0, 1]. A clip whose
// pair cannot be aligned (fewer than 3 joints, degenerate pose) has p_mpjpe NaN;
// the overall p_mpjpe averages the remaining clips (NaN when none remain).
struct MetricReport {
  double mpjpe = 0.0;
  double p_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  std::vector<ClipMetrics> per_clip;
  bool operator==(const MetricReport&) const = default;
};

// One centre pose per clip.
MetricReport compute_report(const std::vector<Pose>& pred, const std::vector<Pose>& gt,
                            const MetricOptions& opt);

// "key=value" lines: mpjpe, p_mpjpe, pck, auc, clips.
std::string to_key_value(const MetricReport& r);
void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

}  // namespace ff
