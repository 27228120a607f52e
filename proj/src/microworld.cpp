// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/microworld.hpp"

#include "star/io.hpp"
#include "star/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace star {
namespace {

using nlohmann::json;

struct Palette {
  Color ground_a, ground_b, sky, accent;
};

// One palette per scene tag; the tag is the only "caption" a scene has.
constexpr std::array<Palette, kSceneTags> kPalettes{{
    {{0.30f, 0.58f, 0.22f}, {0.14f, 0.34f, 0.12f}, {0.55f, 0.75f, 0.95f}, {0.80f, 0.30f, 0.25f}},
    {{0.88f, 0.72f, 0.46f}, {0.64f, 0.48f, 0.28f}, {0.96f, 0.82f, 0.62f}, {0.30f, 0.45f, 0.70f}},
    {{0.93f, 0.95f, 0.98f}, {0.62f, 0.68f, 0.80f}, {0.58f, 0.62f, 0.72f}, {0.20f, 0.55f, 0.35f}},
    {{0.40f, 0.13f, 0.10f}, {0.14f, 0.05f, 0.06f}, {0.08f, 0.08f, 0.18f}, {0.95f, 0.75f, 0.20f}},
}};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

Color jitter(const Color& c, NoiseStream& rng, double amount) {
  Color out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = clamp01(c[i] + amount * (2 * rng.uniform() - 1));
  return out;
}

double uniform(NoiseStream& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

Color mix(const Color& a, const Color& b, double w) {
  Color out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = static_cast<float>(w * a[i] + (1 - w) * b[i]);
  return out;
}

Color shade(const Color& c, double f) {
  return {clamp01(c[0] * f), clamp01(c[1] * f), clamp01(c[2] * f)};
}

// Weight of color a in a two-tone pattern; sharp gives a hard edge, blurred a
// smooth ramp across the same boundary.
double pattern_weight(double s, TextureStyle style) {
  if (style == TextureStyle::sharp) return s > 0 ? 1.0 : 0.0;
  return 0.5 + 0.5 * std::tanh(1.5 * s);
}

enum class Surface { none, ground, box, sphere };

struct Hit {
  double s = std::numeric_limits<double>::infinity();
  Surface surface = Surface::none;
  std::size_t box = 0;
  int axis = 0;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
};

void intersect_box(const Box& b, std::size_t index, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& hit) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = b.center[a] - 0.5 * b.size[a];
    const double hi = b.center[a] + 0.5 * b.size[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return;
      continue;
    }
    double ta = (lo - o[a]) / d[a];
    double tb = (hi - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = a;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return;
  }
  if (axis < 0 || !(t0 > 1e-6) || t0 >= hit.s) return;
  hit.s = t0;
  hit.surface = Surface::box;
  hit.box = index;
  hit.axis = axis;
  hit.normal = Eigen::Vector3d::Zero();
  hit.normal[axis] = d[axis] > 0 ? -1.0 : 1.0;
}

void intersect_sphere(const Eigen::Vector3d& c, double r, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                      Hit& hit) {
  const Eigen::Vector3d oc = o - c;
  const double a = d.squaredNorm();
  const double b = 2 * d.dot(oc);
  const double cc = oc.squaredNorm() - r * r;
  const double disc = b * b - 4 * a * cc;
  if (disc < 0) return;
  const double s = (-b - std::sqrt(disc)) / (2 * a);
  if (!(s > 1e-6) || s >= hit.s) return;
  hit.s = s;
  hit.surface = Surface::sphere;
  hit.normal = (o + s * d - c).normalized();
}

}  // namespace

json pose_to_json(const Pose& p) {
  const auto q = p.quaternion();
  return {{"q", {q[0], q[1], q[2], q[3]}}, {"t", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

Pose pose_from_json(const json& j) {
  const auto q = j.at("q").get<std::array<double, 4>>();
  const auto t = j.at("t").get<std::array<double, 3>>();
  return Pose::from_quaternion(q, {t[0], t[1], t[2]});
}

json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

Intrinsics intrinsics_from_json(const json& j) {
  Intrinsics k;
  k.fx = j.at("fx");
  k.fy = j.at("fy");
  k.cx = j.at("cx");
  k.cy = j.at("cy");
  k.width = j.at("width");
  k.height = j.at("height");
  return k;
}

std::string_view to_string(Difficulty d) { return d == Difficulty::static_scene ? "static" : "dynamic"; }
std::string_view to_string(TextureStyle s) { return s == TextureStyle::sharp ? "sharp" : "blurred"; }

Difficulty parse_difficulty(std::string_view s) {
  if (s == "static") return Difficulty::static_scene;
  if (s == "dynamic") return Difficulty::dynamic_scene;
  throw std::invalid_argument("unknown difficulty: " + std::string(s));
}

TextureStyle parse_texture_style(std::string_view s) {
  if (s == "sharp") return TextureStyle::sharp;
  if (s == "blurred") return TextureStyle::blurred;
  throw std::invalid_argument("unknown texture style: " + std::string(s));
}

bool SceneSpec::operator==(const SceneSpec& o) const {
  if (seed != o.seed || scene_tag != o.scene_tag || difficulty != o.difficulty || style != o.style ||
      checker_period != o.checker_period || ground_a != o.ground_a || ground_b != o.ground_b || sky != o.sky ||
      boxes.size() != o.boxes.size()) {
    return false;
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (boxes[i].center != o.boxes[i].center || boxes[i].size != o.boxes[i].size || boxes[i].color != o.boxes[i].color) {
      return false;
    }
  }
  return mover.center == o.mover.center && mover.velocity == o.mover.velocity && mover.radius == o.mover.radius &&
         mover.color == o.mover.color;
}

SceneSpec build_scene(std::uint64_t seed, Difficulty difficulty, TextureStyle style) {
  NoiseStream rng(seed, 0, 0, "scene");
  SceneSpec s;
  s.seed = seed;
  s.scene_tag = static_cast<int>(seed % kSceneTags);
  s.difficulty = difficulty;
  s.style = style;
  const Palette& pal = kPalettes[static_cast<std::size_t>(s.scene_tag)];
  s.checker_period = uniform(rng, 1.5, 2.5);
  s.ground_a = jitter(pal.ground_a, rng, 0.04);
  s.ground_b = jitter(pal.ground_b, rng, 0.04);
  s.sky = pal.sky;

  const int n_boxes = 4 + static_cast<int>(rng.below(4));
  for (int i = 0; i < n_boxes; ++i) {
    Box b;
    b.size = {uniform(rng, 0.5, 1.6), uniform(rng, 0.5, 2.5), uniform(rng, 0.5, 1.6)};
    b.center = {uniform(rng, -4.0, 4.0), -0.5 * b.size.y(), uniform(rng, 2.5, 12.0)};
    b.color = jitter(rng.uniform() < 0.5 ? pal.accent : mix(pal.accent, pal.ground_a, 0.5), rng, 0.15);
    s.boxes.push_back(b);
  }

  s.mover.radius = uniform(rng, 0.3, 0.6);
  s.mover.center = {uniform(rng, -2.0, 2.0), -s.mover.radius, uniform(rng, 4.0, 8.0)};
  s.mover.color = jitter({0.85f, 0.85f, 0.30f}, rng, 0.1);
  const double heading = uniform(rng, 0.0, 2 * std::numbers::pi);
  const double speed = uniform(rng, 0.02, 0.05);
  s.mover.velocity = difficulty == Difficulty::dynamic_scene
                         ? Eigen::Vector3d(speed * std::cos(heading), 0.0, speed * std::sin(heading))
                         : Eigen::Vector3d::Zero();
  return s;
}

Pose start_pose() {
  Pose p;
  p.translation = {0.0, -kEyeHeight, 0.0};
  return p;
}

RenderOutput render(const SceneSpec& scene, const Pose& pose, const Intrinsics& k, int t) {
  if (!k.valid()) throw std::invalid_argument("render: invalid intrinsics");
  if (t < 0) throw std::invalid_argument("render: negative frame index");
  RenderOutput out{Image(k.width, k.height, 3), DepthMap(k.width, k.height)};
  const Eigen::Vector3d o = pose.translation;
  const Eigen::Vector3d sphere_c = scene.mover.center + static_cast<double>(t) * scene.mover.velocity;
  const Eigen::Vector3d to_light = Eigen::Vector3d(0.4, -1.0, -0.3).normalized();

  auto trace = [&](double px, double py, Hit& hit) {
    const Eigen::Vector3d d = pose.rotation * Eigen::Vector3d((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
    if (d.y() > 1e-12 && o.y() < 0) {
      const double s = -o.y() / d.y();
      if (s > 1e-6) {
        hit.s = s;
        hit.surface = Surface::ground;
      }
    }
    for (std::size_t b = 0; b < scene.boxes.size(); ++b) intersect_box(scene.boxes[b], b, o, d, hit);
    intersect_sphere(sphere_c, scene.mover.radius, o, d, hit);

    if (hit.surface == Surface::none) return scene.sky;
    const Eigen::Vector3d p = o + hit.s * d;
    switch (hit.surface) {
      case Surface::ground: {
        const double u = std::numbers::pi * p.x() / scene.checker_period;
        const double v = std::numbers::pi * p.z() / scene.checker_period;
        // Fade the checker toward its mean once a pixel's ground footprint
        // approaches a texture period; beyond that it would only alias.
        const double periods_per_pixel = hit.s * hit.s / (k.fx * std::abs(o.y()) * scene.checker_period);
        const double contrast = std::clamp(1.0 - 2.0 * periods_per_pixel, 0.0, 1.0);
        const double w = pattern_weight(std::sin(u) * std::sin(v), scene.style);
        return mix(scene.ground_a, scene.ground_b, 0.5 + (w - 0.5) * contrast);
      }
      case Surface::box: {
        const Box& b = scene.boxes[hit.box];
        const double face = hit.axis == 1 ? 1.0 : (hit.axis == 0 ? 0.72 : 0.86);
        const double stripe = pattern_weight(std::sin(std::numbers::pi * p.y() / 0.5), scene.style);
        return shade(b.color, face * (0.8 + 0.2 * stripe));
      }
      case Surface::sphere:
        return shade(scene.mover.color, 0.35 + 0.65 * std::max(0.0, hit.normal.dot(to_light)));
      case Surface::none:
        break;
    }
    return scene.sky;
  };

  // Colors are box-filtered over a 3×3 grid of sub-rays; depth comes from
  // the centre ray alone so it stays an exact oracle.
  constexpr double kSub[3] = {-1.0 / 3.0, 0.0, 1.0 / 3.0};
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      std::array<double, 3> acc{};
      for (double sy : kSub) {
        for (double sx : kSub) {
          Hit hit;
          const Color c = trace(x + sx, y + sy, hit);
          for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
          if (sx == 0.0 && sy == 0.0 && hit.surface != Surface::none) {
            const std::size_t i = out.depth.index(x, y);
            out.depth.values[i] = static_cast<float>(hit.s);
            out.depth.valid[i] = 1;
          }
        }
      }
      for (int ch = 0; ch < 3; ++ch) out.frame.at(x, y, ch) = static_cast<float>(acc[static_cast<std::size_t>(ch)] / 9.0);
    }
  }
  return out;
}

bool Episode::consistent() const {
  const auto n = static_cast<std::size_t>(frame_count);
  return frame_count >= 0 && chunk_frames > 0 && frame_count % chunk_frames == 0 && frames.size() == n &&
         depths.size() == n && poses.size() == n;
}

bool Episode::operator==(const Episode& o) const {
  if (frames != o.frames || depths != o.depths || poses.size() != o.poses.size()) return false;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (poses[i].rotation != o.poses[i].rotation || poses[i].translation != o.poses[i].translation) return false;
  }
  return intrinsics.fx == o.intrinsics.fx && intrinsics.fy == o.intrinsics.fy && intrinsics.cx == o.intrinsics.cx &&
         intrinsics.cy == o.intrinsics.cy && intrinsics.width == o.intrinsics.width &&
         intrinsics.height == o.intrinsics.height && scene_tag == o.scene_tag && frame_count == o.frame_count &&
         chunk_frames == o.chunk_frames && scene_seed == o.scene_seed && difficulty == o.difficulty && style == o.style;
}

Episode generate_episode(const SceneSpec& scene, std::span<const Pose> trajectory, const Intrinsics& k,
                         int chunk_frames) {
  if (chunk_frames <= 0 || trajectory.size() % static_cast<std::size_t>(chunk_frames) != 0) {
    throw std::invalid_argument("generate_episode: trajectory length must be a multiple of K");
  }
  Episode ep;
  ep.intrinsics = k;
  ep.scene_tag = scene.scene_tag;
  ep.frame_count = static_cast<int>(trajectory.size());
  ep.chunk_frames = chunk_frames;
  ep.scene_seed = scene.seed;
  ep.difficulty = scene.difficulty;
  ep.style = scene.style;
  for (std::size_t t = 0; t < trajectory.size(); ++t) {
    RenderOutput r = render(scene, trajectory[t], k, static_cast<int>(t));
    ep.frames.push_back(std::move(r.frame));
    ep.depths.push_back(std::move(r.depth));
    ep.poses.push_back(trajectory[t]);
  }
  return ep;
}

Intrinsics default_intrinsics(int width, int height) { return Intrinsics::from_fov(width, height, 70.0); }

std::vector<Pose> command_trajectory(const Pose& start, std::span<const InteractionCommand> commands, int chunk_frames,
                                     const StepConfig& step) {
  std::vector<Pose> out;
  Pose pose = start;
  for (const InteractionCommand& cmd : commands) {
    const std::vector<Pose> frames = chunk_frame_poses(pose, command_to_delta(cmd, step), chunk_frames);
    out.insert(out.end(), frames.begin(), frames.end());
    pose = frames.back();
  }
  return out;
}

std::vector<InteractionCommand> random_script(std::uint64_t seed, int chunks, bool translating) {
  NoiseStream rng(seed, 0, 0, translating ? "script/translating" : "script/mixed");
  std::vector<InteractionCommand> out;
  for (int i = 0; i < chunks; ++i) {
    const double r = rng.uniform();
    InteractionCommand c;
    if (translating || r < 0.6) {
      const double which = rng.uniform();
      c.kind = which < 0.55   ? CommandKind::move_forward
               : which < 0.75 ? CommandKind::strafe_left
               : which < 0.95 ? CommandKind::strafe_right
                              : CommandKind::move_back;
      c.magnitude = uniform(rng, 0.15, 0.35);
    } else if (r < 0.9) {
      c.kind = rng.uniform() < 0.5 ? CommandKind::yaw_left : CommandKind::yaw_right;
      c.magnitude = uniform(rng, 3.0, 8.0);
    } else if (r < 0.95) {
      c.kind = rng.uniform() < 0.5 ? CommandKind::pitch_up : CommandKind::pitch_down;
      c.magnitude = uniform(rng, 2.0, 4.0);
    } else {
      c.kind = CommandKind::stop;
    }
    out.push_back(c);
  }
  return out;
}

void save_episode(const Episode& ep, const std::filesystem::path& dir) {
  if (!ep.consistent()) throw std::invalid_argument("save_episode: inconsistent episode");
  std::filesystem::create_directories(dir);
  json meta;
  meta["intrinsics"] = intrinsics_to_json(ep.intrinsics);
  meta["poses"] = json::array();
  for (const Pose& p : ep.poses) meta["poses"].push_back(pose_to_json(p));
  meta["scene_tag"] = ep.scene_tag;
  meta["frame_count"] = ep.frame_count;
  meta["K"] = ep.chunk_frames;
  meta["channels"] = 3;
  meta["scene_seed"] = ep.scene_seed;
  meta["difficulty"] = to_string(ep.difficulty);
  meta["style"] = to_string(ep.style);
  write_text(dir / "meta.json", meta.dump(2));

  std::vector<float> frames;
  std::vector<float> depths;
  for (int i = 0; i < ep.frame_count; ++i) {
    const auto& f = ep.frames[static_cast<std::size_t>(i)].data;
    frames.insert(frames.end(), f.begin(), f.end());
    const DepthMap& d = ep.depths[static_cast<std::size_t>(i)];
    for (std::size_t p = 0; p < d.values.size(); ++p) depths.push_back(d.valid[p] ? d.values[p] : 0.0f);
  }
  write_f32(dir / "frames.bin", frames);
  write_f32(dir / "depths.bin", depths);
}

Episode load_episode(const std::filesystem::path& dir) {
  const json meta = json::parse(read_text(dir / "meta.json"));
  Episode ep;
  ep.intrinsics = intrinsics_from_json(meta.at("intrinsics"));
  ep.scene_tag = meta.at("scene_tag");
  ep.frame_count = meta.at("frame_count");
  ep.chunk_frames = meta.at("K");
  ep.scene_seed = meta.value("scene_seed", std::uint64_t{0});
  ep.difficulty = parse_difficulty(meta.value("difficulty", std::string("static")));
  ep.style = parse_texture_style(meta.value("style", std::string("sharp")));
  for (const json& p : meta.at("poses")) ep.poses.push_back(pose_from_json(p));
  if (!ep.intrinsics.valid()) throw std::runtime_error("load_episode: invalid intrinsics in " + dir.string());

  const int w = ep.intrinsics.width;
  const int h = ep.intrinsics.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  const std::vector<float> frames = read_f32(dir / "frames.bin");
  const std::vector<float> depths = read_f32(dir / "depths.bin");
  const auto n = static_cast<std::size_t>(ep.frame_count);
  if (frames.size() != n * plane * 3 || depths.size() != n * plane) {
    throw std::runtime_error("load_episode: raster size mismatch in " + dir.string());
  }
  for (std::size_t i = 0; i < n; ++i) {
    Image img(w, h, 3);
    std::copy_n(frames.begin() + static_cast<std::ptrdiff_t>(i * plane * 3), plane * 3, img.data.begin());
    DepthMap d(w, h);
    for (std::size_t p = 0; p < plane; ++p) {
      const float v = depths[i * plane + p];
      d.values[p] = v;
      d.valid[p] = v > 0.0f;
    }
    ep.frames.push_back(std::move(img));
    ep.depths.push_back(std::move(d));
  }
  if (!ep.consistent()) throw std::runtime_error("load_episode: inconsistent episode in " + dir.string());
  return ep;
}

void save_commands(std::span<const InteractionCommand> commands, const std::filesystem::path& file) {
  json arr = json::array();
  for (const InteractionCommand& c : commands) arr.push_back({{"kind", to_string(c.kind)}, {"magnitude", c.magnitude}});
  write_text(file, arr.dump(2));
}

std::vector<InteractionCommand> load_commands(const std::filesystem::path& file) {
  const json arr = json::parse(read_text(file));
  std::vector<InteractionCommand> out;
  for (const json& j : arr) {
    const std::string name = j.at("kind");
    const auto kind = parse_command_kind(name);
    if (!kind) throw std::runtime_error("unknown command kind: " + name);
    InteractionCommand c{*kind, j.value("magnitude", 0.0)};
    if (!c.valid()) throw std::runtime_error("invalid command in " + file.string());
    out.push_back(c);
  }
  return out;
}

EpisodePair make_pair(std::uint64_t seed, const DatasetOptions& opts) {
  const SceneSpec scene = build_scene(seed, opts.difficulty, opts.style);
  const Intrinsics k = default_intrinsics(opts.width, opts.height);
  EpisodePair pair;
  // The reference walk is mostly forward motion with gentle turns, like a
  // handheld recording of the scene.
  std::vector<InteractionCommand> ref_script;
  NoiseStream rng(seed, 0, 0, "reference-walk");
  for (int i = 0; i < opts.chunks; ++i) {
    if (rng.uniform() < 0.7) {
      ref_script.push_back({CommandKind::move_forward, uniform(rng, 0.1, 0.25)});
    } else {
      ref_script.push_back({rng.uniform() < 0.5 ? CommandKind::yaw_left : CommandKind::yaw_right, uniform(rng, 2.0, 5.0)});
    }
  }
  pair.commands = random_script(mix64(seed ^ 0x7a11), opts.chunks, false);
  const auto ref_traj = command_trajectory(start_pose(), ref_script, opts.chunk_frames);
  const auto tgt_traj = command_trajectory(start_pose(), pair.commands, opts.chunk_frames);
  pair.reference = generate_episode(scene, ref_traj, k, opts.chunk_frames);
  pair.target = generate_episode(scene, tgt_traj, k, opts.chunk_frames);
  return pair;
}

void write_dataset(std::uint64_t seed, const DatasetOptions& opts, const std::filesystem::path& dir) {
  for (int n = 0; n < opts.count; ++n) {
    char name[16];
    std::snprintf(name, sizeof(name), "%04d", n);
    const EpisodePair pair = make_pair(seed + static_cast<std::uint64_t>(n), opts);
    save_episode(pair.reference, dir / name / "reference");
    save_episode(pair.target, dir / name / "target");
    save_commands(pair.commands, dir / name / "commands.json");
  }
}

std::vector<EpisodePair> load_dataset(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "commands.json")) entries.push_back(e.path());
  }
  std::sort(entries.begin(), entries.end());
  std::vector<EpisodePair> out;
  for (const auto& p : entries) {
    out.push_back({load_episode(p / "reference"), load_episode(p / "target"), load_commands(p / "commands.json")});
  }
  if (out.empty()) throw std::runtime_error("load_dataset: no episode pairs under " + dir.string());
  return out;
}

}  // namespace star
