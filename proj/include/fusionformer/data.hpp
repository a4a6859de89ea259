#pragma once

// Pose clips, the pose-file format, windowing, flip augmentation and a
// synthetic articulated-motion generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fusionformer/tensor.hpp"

namespace ff {

struct SkeletonSpec {
  std::vector<std::string> joints;
  std::size_t root = 0;
  // (left, right) joint index pairs swapped by a mirror flip.
  std::vector<std::pair<std::size_t, std::size_t>> left_right;
  // Optional kinematic tree; parent[root] == -1.
  std::vector<int> parent;

  std::size_t size() const { return joints.size(); }
  void validate() const;
  // partner[j] is j's mirror joint (itself when unpaired).
  std::vector<std::size_t> mirror_map() const;
  bool operator==(const SkeletonSpec&) const = default;
};

// Skeleton plus rest-pose bone vectors (offset of each joint from its parent).
struct KinematicModel {
  SkeletonSpec skeleton;
  std::vector<Eigen::Vector3d> offsets;

  double mean_bone_length() const;
};

// "synthetic9": root plus two-joint chains for both arms and legs.
// "h36m17": the 17-joint Human3.6M layout.
KinematicModel kinematic_preset(const std::string& name);

struct PoseClip {
  Tensor frames_2d;                 // T x J x 2, image-normalised
  std::optional<Tensor> frames_3d;  // T x J x 3, root-relative
  double fps = 50.0;

  std::size_t frames() const { return frames_2d.dim(0); }
  std::size_t joints() const { return frames_2d.dim(1); }
};

struct Dataset {
  SkeletonSpec skeleton;
  std::vector<PoseClip> clips;
  std::string split = "train";
};

// Pose file: JSON document
//   { "version": 1,
//     "skeleton": { "joints": [...], "root": r, "left": [...], "right": [...] },
//     "clips": [ { "fps": f, "frames_2d": [[[x, y] x J] x T],
//                  "frames_3d": [[[x, y, z] x J] x T] (optional) } ] }
Dataset parse_pose_document(const std::string& text);
std::string dump_pose_document(const Dataset& ds);
Dataset load_pose_file(const std::filesystem::path& path);
void save_pose_file(const std::filesystem::path& path, const Dataset& ds);

// Sliding windows of `frames` with the given stride. Throws when the clip is
// shorter than one window.
std::vector<PoseClip> window_clips(const PoseClip& sequence, std::size_t frames,
                                   std::size_t stride);
Dataset window_dataset(const Dataset& ds, std::size_t frames, std::size_t stride);

// Mirror about x = 0: negate x (2D and 3D) and swap left/right joints.
PoseClip flip_clip(const PoseClip& clip, const SkeletonSpec& skeleton);
// Same mirror on a single (J, C) or (T, J, C) tensor.
Tensor flip_joints(const Tensor& poses, const SkeletonSpec& skeleton);

struct SynthOptions {
  std::size_t clips = 8;
  std::size_t frames = 9;
  double fps = 50.0;
  double noise_sigma = 0.0;  // std-dev of Gaussian noise added to 2D
  std::string skeleton = "synthetic9";
};

// Deterministic in (seed, options). Joint angles follow sinusoids with random
// amplitude, frequency and phase; 3D is root-relative forward kinematics and
// 2D is its orthographic (x, y) projection.
Dataset synth_dataset(std::uint64_t seed, const SynthOptions& opt);

}  // namespace ff
