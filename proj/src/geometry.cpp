// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace star {
namespace {

constexpr double kMinSplatDepth = 1e-6;

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

// Shared z-buffered splat; zbuf mirrors target.depth in double precision.
void splat_one(const Eigen::Vector3d& cam_point, std::span<const float> color, const Intrinsics& k,
               std::vector<double>& zbuf, WarpResult& target) {
  const double z = cam_point.z();
  if (!(z > kMinSplatDepth)) return;
  const double u = k.fx * cam_point.x() / z + k.cx;
  const double v = k.fy * cam_point.y() / z + k.cy;
  const double px = std::floor(u + 0.5);
  const double py = std::floor(v + 0.5);
  if (!(px >= 0 && py >= 0 && px < target.width() && py < target.height())) return;
  const auto ix = static_cast<int>(px);
  const auto iy = static_cast<int>(py);
  const std::size_t ti = static_cast<std::size_t>(iy) * target.width() + ix;
  if (target.mask[ti] && !(z < zbuf[ti])) return;
  target.mask[ti] = 1;
  zbuf[ti] = z;
  target.depth[ti] = static_cast<float>(z);
  for (int c = 0; c < target.frame.channels; ++c) {
    target.frame.at(ix, iy, c) = c < static_cast<int>(color.size()) ? color[static_cast<std::size_t>(c)] : 0.0f;
  }
}

std::vector<double> zbuffer_from(const WarpResult& target) {
  std::vector<double> zbuf(target.depth.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < zbuf.size(); ++i) {
    if (target.mask[i]) zbuf[i] = target.depth[i];
  }
  return zbuf;
}

Eigen::Vector3d relative_translation(const Pose& origin, const Pose& p) {
  return origin.rotation.transpose() * (p.translation - origin.translation);
}

}  // namespace

Pose Pose::from_matrix(const Eigen::Matrix4d& m) {
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Pose Pose::from_quaternion(const std::array<double, 4>& wxyz, const Eigen::Vector3d& t) {
  Eigen::Quaterniond q(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
  q.normalize();
  Pose p;
  p.rotation = q.toRotationMatrix();
  p.translation = t;
  return p;
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

std::array<double, 4> Pose::quaternion() const {
  Eigen::Quaterniond q(rotation);
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return {q.w(), q.x(), q.y(), q.z()};
}

bool Pose::finite() const { return rotation.allFinite() && translation.allFinite(); }

bool Pose::valid(double tol) const {
  if (!finite()) return false;
  const Eigen::Matrix3d e = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  return e.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

Pose orthonormalized(const Pose& p) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(p.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0) u.col(2) *= -1.0;
  Pose out = p;
  out.rotation = u * v.transpose();
  return out;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  if (!out.valid(1e-6)) out = orthonormalized(out);
  return out;
}

Pose inverse(const Pose& p) {
  Pose out;
  out.rotation = p.rotation.transpose();
  out.translation = -(out.rotation * p.translation);
  return out;
}

Pose accumulate(const Pose& prev, const Pose& delta) { return compose(prev, delta); }

// Positive yaw turns the view toward +x (right); positive pitch tilts it
// toward −y (up).
Pose yaw(double degrees) {
  Pose p;
  p.rotation = Eigen::AngleAxisd(radians(degrees), Eigen::Vector3d::UnitY()).toRotationMatrix();
  return p;
}

Pose pitch(double degrees) {
  Pose p;
  p.rotation = Eigen::AngleAxisd(radians(degrees), Eigen::Vector3d::UnitX()).toRotationMatrix();
  return p;
}

Intrinsics Intrinsics::from_fov(int width, int height, double horizontal_fov_deg) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = 0.5 * width / std::tan(0.5 * radians(horizontal_fov_deg));
  k.fy = k.fx;
  k.cx = 0.5 * (width - 1);
  k.cy = 0.5 * (height - 1);
  return k;
}

bool Intrinsics::valid() const {
  return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
}

std::string_view to_string(CommandKind kind) {
  switch (kind) {
    case CommandKind::move_forward: return "move_forward";
    case CommandKind::move_back: return "move_back";
    case CommandKind::strafe_left: return "strafe_left";
    case CommandKind::strafe_right: return "strafe_right";
    case CommandKind::move_up: return "move_up";
    case CommandKind::move_down: return "move_down";
    case CommandKind::yaw_left: return "yaw_left";
    case CommandKind::yaw_right: return "yaw_right";
    case CommandKind::pitch_up: return "pitch_up";
    case CommandKind::pitch_down: return "pitch_down";
    case CommandKind::stop: return "stop";
  }
  return "stop";
}

std::optional<CommandKind> parse_command_kind(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(CommandKind::stop); ++i) {
    const auto kind = static_cast<CommandKind>(i);
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

bool InteractionCommand::valid() const {
  if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) return false;
  return kind != CommandKind::stop || magnitude == 0.0;
}

Pose command_to_delta(const InteractionCommand& cmd, const StepConfig& step) {
  if (!cmd.valid()) throw std::invalid_argument("command_to_delta: invalid command");
  const double t = cmd.magnitude > 0 ? cmd.magnitude : step.translation;
  const double r = cmd.magnitude > 0 ? cmd.magnitude : step.rotation_deg;
  Pose d;
  switch (cmd.kind) {
    case CommandKind::move_forward: d.translation = {0, 0, t}; break;
    case CommandKind::move_back: d.translation = {0, 0, -t}; break;
    case CommandKind::strafe_left: d.translation = {-t, 0, 0}; break;
    case CommandKind::strafe_right: d.translation = {t, 0, 0}; break;
    case CommandKind::move_up: d.translation = {0, -t, 0}; break;
    case CommandKind::move_down: d.translation = {0, t, 0}; break;
    case CommandKind::yaw_left: d = yaw(-r); break;
    case CommandKind::yaw_right: d = yaw(r); break;
    case CommandKind::pitch_up: d = pitch(r); break;
    case CommandKind::pitch_down: d = pitch(-r); break;
    case CommandKind::stop: break;
  }
  return d;
}

Pose scale_delta(const Pose& delta, double s) {
  const Eigen::AngleAxisd aa(delta.rotation);
  Pose out;
  out.rotation = Eigen::AngleAxisd(aa.angle() * s, aa.axis()).toRotationMatrix();
  out.translation = delta.translation * s;
  return out;
}

std::vector<Pose> chunk_frame_poses(const Pose& prev, const Pose& delta, int frames) {
  if (frames <= 0) throw std::invalid_argument("chunk_frame_poses: frames must be positive");
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (int k = 1; k < frames; ++k) out.push_back(accumulate(prev, scale_delta(delta, static_cast<double>(k) / frames)));
  out.push_back(accumulate(prev, delta));
  return out;
}

WarpResult::WarpResult(int w, int h, int channels)
    : frame(w, h, channels, 0.0f),
      mask(static_cast<std::size_t>(w) * h, 0),
      depth(static_cast<std::size_t>(w) * h, 0.0f) {}

double WarpResult::coverage() const {
  if (mask.empty()) return 0.0;
  const auto covered = std::count(mask.begin(), mask.end(), std::uint8_t{1});
  return static_cast<double>(covered) / static_cast<double>(mask.size());
}

WarpResult reproject(const Image& ref, const DepthMap& ref_depth, const Intrinsics& k, const Pose& rel) {
  if (ref.width != ref_depth.width || ref.height != ref_depth.height || ref.width != k.width ||
      ref.height != k.height || ref.channels <= 0 ||
      ref_depth.values.size() != ref.pixel_count() || ref_depth.valid.size() != ref.pixel_count()) {
    throw std::invalid_argument("reproject: raster dimensions disagree with intrinsics");
  }
  if (!rel.finite()) throw std::invalid_argument("reproject: pose has non-finite entries");

  WarpResult out(ref.width, ref.height, ref.channels);
  std::vector<double> zbuf(ref.pixel_count(), std::numeric_limits<double>::infinity());
  for (int y = 0; y < ref.height; ++y) {
    for (int x = 0; x < ref.width; ++x) {
      const std::size_t i = ref_depth.index(x, y);
      if (!ref_depth.valid[i]) continue;
      const double d = ref_depth.values[i];
      const Eigen::Vector3d src((x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d);
      const std::span<const float> color(&ref.data[i * static_cast<std::size_t>(ref.channels)],
                                         static_cast<std::size_t>(ref.channels));
      splat_one(rel.apply(src), color, k, zbuf, out);
    }
  }
  return out;
}

std::vector<WorldPoint> unproject(const DepthMap& depth, const Intrinsics& k, const Pose& world_from_cam,
                                  const Image* colors, int source_chunk) {
  if (colors != nullptr && (colors->width != depth.width || colors->height != depth.height || colors->channels < 3)) {
    throw std::invalid_argument("unproject: color raster mismatch");
  }
  std::vector<WorldPoint> points;
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      const std::size_t i = depth.index(x, y);
      if (!depth.valid[i]) continue;
      const double d = depth.values[i];
      WorldPoint p;
      p.position = world_from_cam.apply(Eigen::Vector3d((x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d));
      if (colors != nullptr) {
        for (int c = 0; c < 3; ++c) p.color[static_cast<std::size_t>(c)] = colors->at(x, y, c);
      }
      p.source_chunk = source_chunk;
      points.push_back(p);
    }
  }
  return points;
}

void splat_points(std::span<const WorldPoint> points, const Intrinsics& k, const Pose& cam_from_world,
                  WarpResult& target) {
  std::vector<double> zbuf = zbuffer_from(target);
  for (const WorldPoint& p : points) {
    splat_one(cam_from_world.apply(p.position), p.color, k, zbuf, target);
  }
}

double geodesic_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const Eigen::AngleAxisd aa(Eigen::Matrix3d(a.transpose() * b));
  return std::abs(aa.angle()) * 180.0 / std::numbers::pi;
}

TrajectoryError trajectory_error(std::span<const Pose> estimated, std::span<const Pose> reference) {
  if (estimated.empty() || estimated.size() != reference.size()) {
    throw std::invalid_argument("trajectory_error: trajectories must be nonempty and of equal length");
  }
  const std::size_t n = estimated.size();
  double span = 0.0;
  for (const Pose& p : reference) span = std::max(span, relative_translation(reference.front(), p).norm());
  if (span <= 0.0) span = 1.0;

  TrajectoryError err;
  for (std::size_t i = 0; i < n; ++i) {
    err.rot_deg += geodesic_angle_deg(estimated[i].rotation, reference[i].rotation);
    const Eigen::Vector3d te = relative_translation(estimated.front(), estimated[i]) / span;
    const Eigen::Vector3d tr = relative_translation(reference.front(), reference[i]) / span;
    err.trans += (te - tr).norm();
  }
  err.rot_deg /= static_cast<double>(n);
  err.trans /= static_cast<double>(n);
  return err;
}

}  // namespace star
