#include "fusionformer/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "fusionformer/error.hpp"
#include "fusionformer/rng.hpp"

namespace ff {

using json = nlohmann::ordered_json;

void SkeletonSpec::validate() const {
  const std::size_t J = joints.size();
  if (J == 0) throw ConfigError("skeleton has no joints");
  if (root >= J) throw ConfigError("skeleton root " + std::to_string(root) + " out of range");
  std::vector<bool> used(J, false);
  for (const auto& [l, r] : left_right) {
    if (l >= J || r >= J) throw ConfigError("skeleton left/right pair out of range");
    if (l == r || used[l] || used[r]) throw ConfigError("skeleton left/right pairs overlap");
    if (l == root || r == root) throw ConfigError("skeleton root cannot be paired");
    used[l] = used[r] = true;
  }
  if (!parent.empty()) {
    if (parent.size() != J) throw ConfigError("skeleton parent list has wrong length");
    for (std::size_t j = 0; j < J; ++j) {
      if (j == root ? parent[j] != -1 : (parent[j] < 0 || static_cast<std::size_t>(parent[j]) >= J)) {
        throw ConfigError("skeleton parent of joint " + std::to_string(j) + " is invalid");
      }
    }
  }
}

std::vector<std::size_t> SkeletonSpec::mirror_map() const {
  std::vector<std::size_t> m(joints.size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = j;
  for (const auto& [l, r] : left_right) {
    m[l] = r;
    m[r] = l;
  }
  return m;
}

double KinematicModel::mean_bone_length() const {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < offsets.size(); ++j) {
    if (j == skeleton.root) continue;
    total += offsets[j].norm();
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

KinematicModel kinematic_preset(const std::string& name) {
  KinematicModel m;
  if (name == "synthetic9") {
    m.skeleton.joints = {"pelvis",  "l_knee",  "l_ankle", "r_knee", "r_ankle",
                         "l_elbow", "l_wrist", "r_elbow", "r_wrist"};
    m.skeleton.parent = {-1, 0, 1, 0, 3, 0, 5, 0, 7};
    m.skeleton.left_right = {{1, 3}, {2, 4}, {5, 7}, {6, 8}};
    m.offsets = {{0, 0, 0},      {0.1, -0.45, 0},  {0, -0.45, 0}, {-0.1, -0.45, 0},
                 {0, -0.45, 0},  {0.3, 0.35, 0},   {0.25, 0, 0},  {-0.3, 0.35, 0},
                 {-0.25, 0, 0}};
  } else if (name == "h36m17") {
    m.skeleton.joints = {"hip",     "r_hip",      "r_knee",  "r_foot",     "l_hip",   "l_knee",
                         "l_foot",  "spine",      "thorax",  "neck",       "head",    "l_shoulder",
                         "l_elbow", "l_wrist",    "r_shoulder", "r_elbow", "r_wrist"};
    m.skeleton.parent = {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
    m.skeleton.left_right = {{4, 1}, {5, 2}, {6, 3}, {11, 14}, {12, 15}, {13, 16}};
    const double s = 0.85;
    m.offsets = {{0, 0, 0},         {-0.13, 0, 0},     {0, -0.44, 0},    {0, -0.44, 0},
                 {0.13, 0, 0},      {0, -0.44, 0},     {0, -0.44, 0},    {0, 0.23, 0},
                 {0, 0.25, 0},      {0, 0.1, 0.02},    {0, 0.12, 0},     {0.15, 0, 0},
                 {0.28, 0, 0},      {0.25, 0, 0},      {-0.15, 0, 0},    {-0.28, 0, 0},
                 {-0.25, 0, 0}};
    for (auto& o : m.offsets) o *= s;
  } else {
    throw ConfigError("unknown skeleton preset '" + name + "' (expected synthetic9 or h36m17)");
  }
  m.skeleton.root = 0;
  m.skeleton.validate();
  return m;
}

// ---- pose file ---------------------------------------------------------------

namespace {

std::string at(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

// Reads a T x J x C nested array.
Tensor read_frames(const json& node, const std::string& field, std::size_t joints,
                   std::size_t channels) {
  if (!node.is_array() || node.empty()) throw FormatError(field, "expected a non-empty array of frames");
  const std::size_t T = node.size();
  std::vector<double> values;
  values.reserve(T * joints * channels);
  for (std::size_t t = 0; t < T; ++t) {
    const json& frame = node[t];
    const std::string ff = at(field, t);
    if (!frame.is_array()) throw FormatError(ff, "expected an array of joints");
    if (frame.size() != joints) {
      throw FormatError(ff, "expected " + std::to_string(joints) + " joints, got " +
                                std::to_string(frame.size()));
    }
    for (std::size_t j = 0; j < joints; ++j) {
      const json& pt = frame[j];
      const std::string pf = at(ff, j);
      if (!pt.is_array() || pt.size() != channels) {
        throw FormatError(pf, "expected " + std::to_string(channels) + " coordinates");
      }
      for (std::size_t c = 0; c < channels; ++c) {
        if (!pt[c].is_number()) throw FormatError(at(pf, c), "expected a number");
        const double v = pt[c].get<double>();
        if (!std::isfinite(v)) throw FormatError(at(pf, c), "non-finite value");
        values.push_back(v);
      }
    }
  }
  return Tensor::from({T, joints, channels}, std::move(values));
}

json write_frames(const Tensor& t) {
  const std::size_t T = t.dim(0), J = t.dim(1), C = t.dim(2);
  const auto d = t.data();
  json frames = json::array();
  for (std::size_t f = 0; f < T; ++f) {
    json frame = json::array();
    for (std::size_t j = 0; j < J; ++j) {
      json pt = json::array();
      for (std::size_t c = 0; c < C; ++c) pt.push_back(d[(f * J + j) * C + c]);
      frame.push_back(std::move(pt));
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

std::vector<std::size_t> index_list(const json& node, const std::string& field) {
  if (!node.is_array()) throw FormatError(field, "expected an array of joint indices");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < node.size(); ++i) {
    if (!node[i].is_number_unsigned()) throw FormatError(at(field, i), "expected a joint index");
    out.push_back(node[i].get<std::size_t>());
  }
  return out;
}

}  // namespace

Dataset parse_pose_document(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("", std::string("malformed pose file: ") + e.what());
  }
  if (!doc.is_object()) throw FormatError("", "pose file must be a JSON object");
  if (!doc.contains("version") || doc["version"] != 1) {
    throw FormatError("version", "unsupported or missing version (expected 1)");
  }
  if (!doc.contains("skeleton") || !doc["skeleton"].is_object()) {
    throw FormatError("skeleton", "missing skeleton object");
  }
  const json& sk = doc["skeleton"];
  Dataset ds;
  if (!sk.contains("joints") || !sk["joints"].is_array()) {
    throw FormatError("skeleton.joints", "expected an array of joint names");
  }
  for (std::size_t i = 0; i < sk["joints"].size(); ++i) {
    if (!sk["joints"][i].is_string()) throw FormatError(at("skeleton.joints", i), "expected a name");
    ds.skeleton.joints.push_back(sk["joints"][i].get<std::string>());
  }
  if (!sk.contains("root") || !sk["root"].is_number_unsigned()) {
    throw FormatError("skeleton.root", "expected a joint index");
  }
  ds.skeleton.root = sk["root"].get<std::size_t>();
  const auto left = index_list(sk.value("left", json::array()), "skeleton.left");
  const auto right = index_list(sk.value("right", json::array()), "skeleton.right");
  if (left.size() != right.size()) {
    throw FormatError("skeleton.right", "left and right lists differ in length");
  }
  for (std::size_t i = 0; i < left.size(); ++i) ds.skeleton.left_right.emplace_back(left[i], right[i]);
  try {
    ds.skeleton.validate();
  } catch (const ConfigError& e) {
    throw FormatError("skeleton", e.what());
  }

  if (!doc.contains("clips") || !doc["clips"].is_array()) {
    throw FormatError("clips", "expected an array of clips");
  }
  const std::size_t J = ds.skeleton.size();
  for (std::size_t i = 0; i < doc["clips"].size(); ++i) {
    const json& c = doc["clips"][i];
    const std::string field = at("clips", i);
    if (!c.is_object()) throw FormatError(field, "expected a clip object");
    PoseClip clip;
    if (c.contains("fps")) {
      if (!c["fps"].is_number() || !(c["fps"].get<double>() > 0.0)) {
        throw FormatError(field + ".fps", "expected a positive number");
      }
      clip.fps = c["fps"].get<double>();
    }
    if (!c.contains("frames_2d")) throw FormatError(field + ".frames_2d", "missing");
    clip.frames_2d = read_frames(c["frames_2d"], field + ".frames_2d", J, 2);
    if (c.contains("frames_3d") && !c["frames_3d"].is_null()) {
      clip.frames_3d = read_frames(c["frames_3d"], field + ".frames_3d", J, 3);
      if (clip.frames_3d->dim(0) != clip.frames()) {
        throw FormatError(field + ".frames_3d", "frame count differs from frames_2d");
      }
    }
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

std::string dump_pose_document(const Dataset& ds) {
  json sk{{"joints", ds.skeleton.joints}, {"root", ds.skeleton.root}};
  json left = json::array(), right = json::array();
  for (const auto& [l, r] : ds.skeleton.left_right) {
    left.push_back(l);
    right.push_back(r);
  }
  sk["left"] = std::move(left);
  sk["right"] = std::move(right);
  json clips = json::array();
  for (const auto& c : ds.clips) {
    json jc{{"fps", c.fps}, {"frames_2d", write_frames(c.frames_2d)}};
    if (c.frames_3d) jc["frames_3d"] = write_frames(*c.frames_3d);
    clips.push_back(std::move(jc));
  }
  json doc{{"version", 1}, {"skeleton", std::move(sk)}, {"clips", std::move(clips)}};
  return doc.dump() + "\n";
}

Dataset load_pose_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open pose file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_pose_document(ss.str());
}

void save_pose_file(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write pose file " + path.string());
  out << dump_pose_document(ds);
  if (!out) throw Error("failed writing pose file " + path.string());
}

// ---- windowing / flip --------------------------------------------------------

std::vector<PoseClip> window_clips(const PoseClip& sequence, std::size_t frames,
                                   std::size_t stride) {
  if (frames == 0 || stride == 0) throw ConfigError("window length and stride must be positive");
  if (sequence.frames() < frames) {
    throw ShapeError("sequence of " + std::to_string(sequence.frames()) +
                     " frames is shorter than the window of " + std::to_string(frames));
  }
  std::vector<PoseClip> out;
  for (std::size_t start = 0; start + frames <= sequence.frames(); start += stride) {
    PoseClip w;
    w.fps = sequence.fps;
    w.frames_2d = slice(sequence.frames_2d, 0, start, frames).detach();
    if (sequence.frames_3d) w.frames_3d = slice(*sequence.frames_3d, 0, start, frames).detach();
    out.push_back(std::move(w));
  }
  return out;
}

Dataset window_dataset(const Dataset& ds, std::size_t frames, std::size_t stride) {
  Dataset out{ds.skeleton, {}, ds.split};
  for (const auto& c : ds.clips) {
    auto w = window_clips(c, frames, stride);
    out.clips.insert(out.clips.end(), std::make_move_iterator(w.begin()),
                     std::make_move_iterator(w.end()));
  }
  return out;
}

Tensor flip_joints(const Tensor& poses, const SkeletonSpec& skeleton) {
  if (poses.rank() < 2) throw ShapeError("flip expects (..., J, C) poses");
  const std::size_t J = poses.dim(poses.rank() - 2);
  const std::size_t C = poses.shape().back();
  if (J != skeleton.size()) {
    throw ShapeError("flip: pose has " + std::to_string(J) + " joints, skeleton has " +
                     std::to_string(skeleton.size()));
  }
  const auto partner = skeleton.mirror_map();
  const auto d = poses.data();
  std::vector<double> out(d.size());
  const std::size_t n = d.size() / (J * C);
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t src = (f * J + partner[j]) * C;
      const std::size_t dst = (f * J + j) * C;
      out[dst] = -d[src];
      for (std::size_t c = 1; c < C; ++c) out[dst + c] = d[src + c];
    }
  }
  return Tensor::from(poses.shape(), std::move(out));
}

PoseClip flip_clip(const PoseClip& clip, const SkeletonSpec& skeleton) {
  PoseClip out;
  out.fps = clip.fps;
  out.frames_2d = flip_joints(clip.frames_2d, skeleton);
  if (clip.frames_3d) out.frames_3d = flip_joints(*clip.frames_3d, skeleton);
  return out;
}

// ---- synthetic motion ----------------------------------------------------------

namespace {

Eigen::Matrix3d rot_x(double a) { return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix(); }
Eigen::Matrix3d rot_y(double a) { return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()).toRotationMatrix(); }
Eigen::Matrix3d rot_z(double a) { return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

struct Oscillator {
  double amplitude, omega, phase;
  double at(double t) const { return amplitude * std::sin(omega * t + phase); }
};

Oscillator random_oscillator(Rng& rng, double max_amplitude) {
  const double two_pi = 2.0 * std::numbers::pi;
  return {rng.uniform(0.2, 1.0) * max_amplitude, two_pi * rng.uniform(0.5, 2.0),
          rng.uniform(0.0, two_pi)};
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, const SynthOptions& opt) {
  if (opt.frames == 0) throw ConfigError("synthetic clips need at least one frame");
  if (!(opt.fps > 0.0)) throw ConfigError("fps must be positive");
  if (opt.noise_sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  const KinematicModel km = kinematic_preset(opt.skeleton);
  const SkeletonSpec& sk = km.skeleton;
  const std::size_t J = sk.size();
  const std::size_t T = opt.frames;

  // Parents precede children in both presets; forward kinematics relies on it.
  Rng rng(seed);
  Dataset ds;
  ds.skeleton = sk;
  for (std::size_t ci = 0; ci < opt.clips; ++ci) {
    const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const Oscillator sway = random_oscillator(rng, 0.5);
    const Oscillator tilt = random_oscillator(rng, 0.2);
    std::vector<Oscillator> bend(J), twist(J);
    for (std::size_t j = 0; j < J; ++j) {
      bend[j] = random_oscillator(rng, 0.8);
      twist[j] = random_oscillator(rng, 0.4);
    }
    const double t0 = rng.uniform(0.0, 10.0);

    std::vector<double> p3(T * J * 3), p2(T * J * 2);
    for (std::size_t f = 0; f < T; ++f) {
      const double t = t0 + static_cast<double>(f) / opt.fps;
      std::vector<Eigen::Matrix3d> world(J);
      std::vector<Eigen::Vector3d> pos(J);
      for (std::size_t j = 0; j < J; ++j) {
        if (j == sk.root) {
          world[j] = rot_y(heading + sway.at(t)) * rot_x(tilt.at(t));
          pos[j].setZero();
          continue;
        }
        const auto par = static_cast<std::size_t>(sk.parent[j]);
        world[j] = world[par] * rot_z(bend[j].at(t)) * rot_x(twist[j].at(t));
        pos[j] = pos[par] + world[j] * km.offsets[j];
      }
      for (std::size_t j = 0; j < J; ++j) {
        for (int c = 0; c < 3; ++c) p3[(f * J + j) * 3 + c] = pos[j](c);
        for (int c = 0; c < 2; ++c) {
          const double noise = opt.noise_sigma > 0.0 ? rng.normal(0.0, opt.noise_sigma) : 0.0;
          p2[(f * J + j) * 2 + c] = pos[j](c) + noise;
        }
      }
    }
    PoseClip clip;
    clip.fps = opt.fps;
    clip.frames_2d = Tensor::from({T, J, 2}, std::move(p2));
    clip.frames_3d = Tensor::from({T, J, 3}, std::move(p3));
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

}  // namespace ff
