#include "fusionformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "fusionformer/error.hpp"

namespace ff {

void LossWeights::validate() const {
  if (!(lambda_m >= 0.0) || !(lambda_r >= 0.0)) throw ConfigError("loss weights must be >= 0");
  if (lambda_m == 0.0 && lambda_r == 0.0) throw ConfigError("loss weights cannot both be zero");
}

namespace {

Tensor mean_joint_error(const char* what, const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() == 0 || pred.shape().back() != 3) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) +
                     " vs ground truth " + shape_str(gt.shape()));
  }
  return mean(l2_norm_lastaxis(sub(pred, gt)));
}

}  // namespace

Tensor loss_m(const Tensor& pred_seq, const Tensor& gt_seq) {
  if (pred_seq.rank() != 3) throw ShapeError("loss_m expects (T, J, 3) sequences");
  return mean_joint_error("loss_m", pred_seq, gt_seq);
}

Tensor loss_r(const Tensor& pred_center, const Tensor& gt_center) {
  if (pred_center.rank() != 2) throw ShapeError("loss_r expects (J, 3) poses");
  return mean_joint_error("loss_r", pred_center, gt_center);
}

Tensor loss_total(const Tensor& lm, const Tensor& lr, const LossWeights& w) {
  w.validate();
  Tensor total = scale(lm, w.lambda_m);
  if (lr.defined()) total = add(total, scale(lr, w.lambda_r));
  return total;
}

Pose to_pose(const Tensor& t) {
  if (t.rank() != 2 || t.shape()[1] != 3) {
    throw ShapeError("expected a (J, 3) pose, got " + shape_str(t.shape()));
  }
  const std::size_t J = t.shape()[0];
  Pose p(static_cast<Eigen::Index>(J), 3);
  const auto d = t.data();
  for (std::size_t j = 0; j < J; ++j) {
    for (int c = 0; c < 3; ++c) p(static_cast<Eigen::Index>(j), c) = d[j * 3 + c];
  }
  return p;
}

Tensor to_tensor(const Pose& p) {
  std::vector<double> v(static_cast<std::size_t>(p.rows()) * 3);
  for (Eigen::Index j = 0; j < p.rows(); ++j) {
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(j) * 3 + c] = p(j, c);
  }
  return Tensor::from({static_cast<std::size_t>(p.rows()), 3}, std::move(v));
}

namespace {

void check_pair(const Pose& pred, const Pose& gt) {
  if (pred.rows() != gt.rows() || pred.rows() == 0) {
    throw ShapeError("pose pair has " + std::to_string(pred.rows()) + " vs " +
                     std::to_string(gt.rows()) + " joints");
  }
}

void check_root(const Pose& p, std::size_t root) {
  if (root >= static_cast<std::size_t>(p.rows())) {
    throw ConfigError("root joint " + std::to_string(root) + " out of range for " +
                      std::to_string(p.rows()) + " joints");
  }
}

Eigen::VectorXd root_relative_errors(const Pose& pred, const Pose& gt, std::size_t root) {
  check_pair(pred, gt);
  check_root(pred, root);
  const auto r = static_cast<Eigen::Index>(root);
  const Pose a = pred.rowwise() - pred.row(r);
  const Pose b = gt.rowwise() - gt.row(r);
  return (a - b).rowwise().norm();
}

}  // namespace

double mpjpe(const Pose& pred, const Pose& gt, std::size_t root) {
  return root_relative_errors(pred, gt, root).mean();
}

Pose Similarity::apply(const Pose& p) const {
  Pose out = scale * (p * rotation.transpose());
  out.rowwise() += translation;
  return out;
}

Alignment procrustes_align(const Pose& pred, const Pose& gt) {
  check_pair(pred, gt);
  if (pred.rows() < 3) throw NumericError("procrustes_align needs at least 3 joints");
  const Eigen::RowVector3d mu_p = pred.colwise().mean();
  const Eigen::RowVector3d mu_g = gt.colwise().mean();
  const Pose p = pred.rowwise() - mu_p;
  const Pose g = gt.rowwise() - mu_g;

  auto rank_below_two = [](const Pose& x) {
    Eigen::JacobiSVD<Pose> svd(x);
    const auto s = svd.singularValues();
    return s(0) == 0.0 || s(1) <= 1e-12 * s(0);
  };
  if (rank_below_two(g)) throw NumericError("procrustes_align: ground truth pose is degenerate");
  if (rank_below_two(p)) throw NumericError("procrustes_align: predicted pose is degenerate");

  const Eigen::Matrix3d h = p.transpose() * g;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, 1.0);
  // Flip the axis of the smallest singular value if the optimum is a reflection.
  if ((v * u.transpose()).determinant() < 0.0) d(2) = -1.0;

  Similarity t;
  t.rotation = v * d.asDiagonal() * u.transpose();
  t.scale = svd.singularValues().dot(d) / p.squaredNorm();
  t.translation = mu_g - t.scale * (mu_p * t.rotation.transpose());
  return {t.apply(pred), t};
}

double p_mpjpe(const Pose& pred, const Pose& gt) {
  const Alignment a = procrustes_align(pred, gt);
  return (a.aligned - gt).rowwise().norm().mean();
}

namespace {

// Root-relative errors of every non-root joint across the set.
std::vector<double> pooled_errors(const std::vector<Pose>& pred, const std::vector<Pose>& gt,
                                  std::size_t root) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth set sizes differ");
  std::vector<double> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Eigen::VectorXd e = root_relative_errors(pred[i], gt[i], root);
    for (Eigen::Index j = 0; j < e.size(); ++j) {
      if (static_cast<std::size_t>(j) != root) out.push_back(e(j));
    }
  }
  return out;
}

double pck_of(const std::vector<double>& errors, double threshold) {
  if (errors.empty()) return 100.0;
  std::size_t hit = 0;
  for (double e : errors) hit += e < threshold ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(errors.size());
}

double auc_of(const std::vector<double>& errors, double mm_per_unit) {
  constexpr int kSteps = 30;  // 5 mm ... 150 mm
  double acc = 0.0;
  for (int s = 1; s <= kSteps; ++s) acc += pck_of(errors, 5.0 * s / mm_per_unit);
  return acc / kSteps / 100.0;
}

}  // namespace

double pck(const std::vector<Pose>& pred, const std::vector<Pose>& gt, double threshold,
           std::size_t root) {
  if (!(threshold > 0.0)) throw ConfigError("pck threshold must be positive");
  return pck_of(pooled_errors(pred, gt, root), threshold);
}

double auc(const std::vector<Pose>& pred, const std::vector<Pose>& gt, std::size_t root,
           double mm_per_unit) {
  return auc_of(pooled_errors(pred, gt, root), mm_per_unit);
}

MetricReport compute_report(const std::vector<Pose>& pred, const std::vector<Pose>& gt,
                            const MetricOptions& opt) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth set sizes differ");
  MetricReport r;
  const double threshold = opt.pck_threshold_mm / opt.mm_per_unit;
  std::size_t aligned = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::vector<double> errors = pooled_errors({pred[i]}, {gt[i]}, opt.root);
    ClipMetrics c;
    c.mpjpe = mpjpe(pred[i], gt[i], opt.root);
    try {
      c.p_mpjpe = p_mpjpe(pred[i], gt[i]);
      r.p_mpjpe += c.p_mpjpe;
      ++aligned;
    } catch (const NumericError&) {
      c.p_mpjpe = std::numeric_limits<double>::quiet_NaN();
    }
    c.pck = pck_of(errors, threshold);
    c.auc = auc_of(errors, opt.mm_per_unit);
    r.per_clip.push_back(c);
    r.mpjpe += c.mpjpe;
  }
  if (!pred.empty()) r.mpjpe /= static_cast<double>(pred.size());
  r.p_mpjpe = aligned ? r.p_mpjpe / static_cast<double>(aligned)
                      : std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> all = pooled_errors(pred, gt, opt.root);
  r.pck = pck_of(all, threshold);
  r.auc = auc_of(all, opt.mm_per_unit);
  return r;
}

std::string to_key_value(const MetricReport& r) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "mpjpe=" << fmt(r.mpjpe) << '\n'
     << "p_mpjpe=" << fmt(r.p_mpjpe) << '\n'
     << "pck=" << fmt(r.pck) << '\n'
     << "auc=" << fmt(r.auc) << '\n'
     << "clips=" << r.per_clip.size() << '\n';
  return os.str();
}

namespace {

// JSON has no NaN; an undefined metric is written as null.
nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json() : nlohmann::json(v); }

double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& c : r.per_clip) {
    clips.push_back({{"mpjpe", c.mpjpe}, {"p_mpjpe", number_or_null(c.p_mpjpe)}, {"pck", c.pck}, {"auc", c.auc}});
  }
  j = nlohmann::json{{"mpjpe", r.mpjpe},
                     {"p_mpjpe", number_or_null(r.p_mpjpe)},
                     {"pck", r.pck},
                     {"auc", r.auc},
                     {"per_clip", std::move(clips)}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  try {
    r.mpjpe = j.at("mpjpe").get<double>();
    r.p_mpjpe = number_from(j.at("p_mpjpe"));
    r.pck = j.at("pck").get<double>();
    r.auc = j.at("auc").get<double>();
    r.per_clip.clear();
    for (const auto& c : j.at("per_clip")) {
      r.per_clip.push_back({c.at("mpjpe").get<double>(), number_from(c.at("p_mpjpe")),
                            c.at("pck").get<double>(), c.at("auc").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report", e.what());
  }
}

}  // namespace ff
