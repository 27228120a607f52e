// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rigid camera poses, interaction commands and depth-based forward
// reprojection.
//
// Camera convention: right-handed, +x right, +y down, +z forward; pixel (0,0)
// is the top-left pixel centre. Poses passed around as camera state are
// camera-to-world transforms.

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace star {

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_matrix(const Eigen::Matrix4d& m);
  /// Quaternion as (w, x, y, z).
  static Pose from_quaternion(const std::array<double, 4>& wxyz, const Eigen::Vector3d& t);

  Eigen::Matrix4d matrix() const;
  std::array<double, 4> quaternion() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  bool finite() const;
  /// Orthonormal with det +1 within tol.
  bool valid(double tol = 1e-6) const;
};

/// Applies b then a.
Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);
/// Next camera state from the previous one and a camera-local delta.
Pose accumulate(const Pose& prev, const Pose& delta);
/// Projects the rotation back onto SO(3).
Pose orthonormalized(const Pose& p);

/// Elementary rotations about camera axes, angles in degrees.
Pose yaw(double degrees);
Pose pitch(double degrees);

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  /// Square pixels, principal point at the image centre.
  static Intrinsics from_fov(int width, int height, double horizontal_fov_deg);
  bool valid() const;
};

/// H×W×C raster, row-major, channel-last.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool operator==(const Image&) const = default;
};

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int w, int h)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0f), valid(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  bool operator==(const DepthMap&) const = default;
};

enum class CommandKind {
  move_forward,
  move_back,
  strafe_left,
  strafe_right,
  move_up,
  move_down,
  yaw_left,
  yaw_right,
  pitch_up,
  pitch_down,
  stop,
};

std::string_view to_string(CommandKind kind);
std::optional<CommandKind> parse_command_kind(std::string_view name);

struct InteractionCommand {
  CommandKind kind = CommandKind::stop;
  /// World units for translations, degrees for rotations. Zero on a motion
  /// command selects the default step.
  double magnitude = 0.0;

  bool valid() const;
};

struct StepConfig {
  double translation = 0.25;
  double rotation_deg = 5.0;
};

/// Camera-local relative pose for one command.
Pose command_to_delta(const InteractionCommand& cmd, const StepConfig& step = {});

/// Fraction s of a relative pose: translation scaled, rotation angle scaled
/// about the same axis.
Pose scale_delta(const Pose& delta, double s);

/// Per-frame poses of one chunk: frame k sits at prev · scale_delta(delta,
/// (k+1)/K), so the last frame lands exactly on accumulate(prev, delta).
std::vector<Pose> chunk_frame_poses(const Pose& prev, const Pose& delta, int frames);

struct WarpResult {
  Image frame;
  std::vector<std::uint8_t> mask;
  std::vector<float> depth;

  WarpResult() = default;
  WarpResult(int w, int h, int channels);

  int width() const { return frame.width; }
  int height() const { return frame.height; }
  double coverage() const;
};

struct WorldPoint {
  Eigen::Vector3d position;
  std::array<float, 3> color{};
  int source_chunk = 0;
};

/// Forward-splats every valid source pixel through rel (target-from-source)
/// with a one-pixel footprint and nearest-depth z-buffer.
WarpResult reproject(const Image& ref, const DepthMap& ref_depth, const Intrinsics& k, const Pose& rel);

/// One world point per valid depth pixel; colors are taken from `colors` when
/// given (3 channels), otherwise left zero.
std::vector<WorldPoint> unproject(const DepthMap& depth, const Intrinsics& k, const Pose& world_from_cam,
                                  const Image* colors = nullptr, int source_chunk = 0);

/// Splats world points into an existing warp target (z-buffered against what
/// is already there).
void splat_points(std::span<const WorldPoint> points, const Intrinsics& k, const Pose& cam_from_world,
                  WarpResult& target);

struct TrajectoryError {
  double rot_deg = 0.0;
  double trans = 0.0;
};

double geodesic_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

/// Rotation: mean geodesic angle between raw corresponding rotations.
/// Translation: both trajectories re-expressed relative to their first pose,
/// divided by the reference's largest distance from its start (1 if static),
/// then mean Euclidean distance.
TrajectoryError trajectory_error(std::span<const Pose> estimated, std::span<const Pose> reference);

}  // namespace star
