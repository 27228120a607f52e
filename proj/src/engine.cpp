// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/engine.hpp"

#include "star/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace star {

using nlohmann::json;

int select_reference(int chunk, int reference_chunks) {
  if (reference_chunks <= 0) throw std::invalid_argument("select_reference: empty reference");
  return std::clamp(chunk, 0, reference_chunks - 1);
}

void PointCloudMemory::add(std::span<const WorldPoint> points) {
  if (budget_ == 0) return;
  for (const WorldPoint& p : points) points_.push_back(p);
  // Points arrive in chunk order, so the front holds the oldest sources.
  while (points_.size() > budget_) points_.pop_front();
}

ag::Mat chunk_tokens(const Episode& ep, int chunk, int patch) {
  const int k = ep.chunk_frames;
  if (chunk < 0 || chunk >= ep.chunk_count()) throw std::out_of_range("chunk_tokens: chunk out of range");
  return patchify(std::span<const Image>(ep.frames).subspan(static_cast<std::size_t>(chunk * k), static_cast<std::size_t>(k)),
                  patch);
}

namespace {

// A one-pixel splat leaves gaps in magnified surfaces through which farther
// points show. Drop a covered pixel when both neighbours along some axis are
// clearly nearer; a true depth edge has a nearer neighbour on one side only.
void drop_bleed_through(WarpResult& w) {
  const int width = w.width();
  const int height = w.height();
  auto nearer = [&](int x, int y, float d) {
    if (x < 0 || y < 0 || x >= width || y >= height) return false;
    const std::size_t j = static_cast<std::size_t>(y) * width + x;
    return w.mask[j] && w.depth[j] * 1.15f < d;
  };
  static constexpr int kAxes[4][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}};
  std::vector<std::uint8_t> drop(w.mask.size(), 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      if (!w.mask[i]) continue;
      for (const auto& a : kAxes) {
        if (nearer(x + a[0], y + a[1], w.depth[i]) && nearer(x - a[0], y - a[1], w.depth[i])) {
          drop[i] = 1;
          break;
        }
      }
    }
  }
  for (std::size_t i = 0; i < drop.size(); ++i) {
    if (!drop[i]) continue;
    w.mask[i] = 0;
    w.depth[i] = 0.0f;
    for (int c = 0; c < w.frame.channels; ++c) w.frame.data[i * w.frame.channels + c] = 0.0f;
  }
}

}  // namespace

ChunkCondition build_condition(const DenoiserConfig& config, const Episode& reference, int chunk,
                               std::span<const Pose> frame_poses, const ConditionOptions& options,
                               const PointCloudMemory* memory) {
  if (static_cast<int>(frame_poses.size()) != config.frames || reference.chunk_frames != config.frames) {
    throw std::invalid_argument("build_condition: frame count does not match config");
  }
  if (reference.intrinsics.width != config.image_width || reference.intrinsics.height != config.image_height) {
    throw std::invalid_argument("build_condition: reference size does not match config");
  }
  ChunkCondition c;
  const int r = select_reference(chunk, reference.chunk_count());
  if (options.reference) {
    c.reference_chunk = r;
    c.reference_tokens = chunk_tokens(reference, r, config.patch);
  }
  if (!options.geometry) {
    c.geometry = ag::Mat::Zero(config.tokens(), config.geometry_dim());
    return c;
  }
  const Intrinsics& k = reference.intrinsics;
  double coverage = 0;
  for (int f = 0; f < config.frames; ++f) {
    const Pose& target = frame_poses[static_cast<std::size_t>(f)];
    const auto aligned = static_cast<std::size_t>(r * config.frames + f);
    WarpResult w = reproject(reference.frames[aligned], reference.depths[aligned], k,
                             compose(inverse(target), reference.poses[aligned]));
    if (memory && memory->size() > 0) {
      const std::vector<WorldPoint> pts(memory->points().begin(), memory->points().end());
      splat_points(pts, k, inverse(target), w);
    }
    drop_bleed_through(w);
    coverage += w.coverage();
    c.warps.push_back(std::move(w));
  }
  c.coverage = coverage / config.frames;
  c.geometry = patchify_geometry(c.warps, config.patch);
  return c;
}

DepthProvider oracle_depth(const SceneSpec& scene, const Intrinsics& k) {
  return [scene, k](const Pose& pose, int t) { return render(scene, pose, k, t).depth; };
}

Session::Session(const DenoiserModel& student, Episode reference, SessionOptions options)
    : student_(student),
      reference_(std::move(reference)),
      options_(std::move(options)),
      cache_(student.config()),
      memory_(options_.point_budget),
      pose_(options_.start) {
  const DenoiserConfig& c = student.config();
  if (!reference_.consistent() || reference_.chunk_count() == 0) throw std::invalid_argument("Session: empty reference");
  if (reference_.chunk_frames != c.frames || reference_.intrinsics.width != c.image_width ||
      reference_.intrinsics.height != c.image_height) {
    throw std::invalid_argument("Session: reference does not match the model config");
  }
  if (reference_.scene_tag < 0 || reference_.scene_tag >= c.tags) throw std::invalid_argument("Session: bad scene tag");
  if (!options_.schedule.valid()) throw std::invalid_argument("Session: invalid schedule");
  if (options_.point_memory && !options_.depth) throw std::invalid_argument("Session: point memory needs a depth source");
}

ChunkResult Session::step(const InteractionCommand& cmd) {
  if (!cmd.valid()) throw std::invalid_argument("Session::step: invalid command");
  const auto t0 = std::chrono::steady_clock::now();
  const DenoiserConfig& c = student_.config();
  const int i = chunk_;
  ChunkResult out;
  out.index = i;
  out.command = cmd;
  out.poses = chunk_frame_poses(pose_, command_to_delta(cmd, options_.step), c.frames);

  ChunkCondition cond = build_condition(c, reference_, i, out.poses, options_.conditions,
                                        options_.point_memory ? &memory_ : nullptr);
  ag::NoGradGuard no_grad;
  if (cond.reference_chunk != cached_reference_) {
    if (cond.reference_chunk >= 0) {
      cache_.set_reference(student_.encode(ag::constant(cond.reference_tokens), BlockKind::reference, reference_.scene_tag));
    } else {
      cache_.clear_reference();
    }
    cached_reference_ = cond.reference_chunk;
  }
  const ag::Var x0 = sample_chunk(student_, cache_.view(), &cond.geometry, reference_.scene_tag, options_.schedule,
                                  options_.seed, i);
  cache_.append_history(student_.encode(x0, BlockKind::history, reference_.scene_tag), i,
                        stream_key(options_.seed, i, 0, "sample"));
  out.frames = unpatchify(x0.value(), c.frames, c.image_width, c.image_height, c.channels, c.patch);

  for (int f = 0; f < c.frames; ++f) {
    out.frame_times.push_back(time_);
    if (!freeze_) ++time_;
  }
  for (const WarpResult& w : cond.warps) out.masks.push_back(w.mask);
  if (cond.warps.empty()) {
    out.masks.assign(static_cast<std::size_t>(c.frames),
                     std::vector<std::uint8_t>(static_cast<std::size_t>(c.image_width) * c.image_height, 0));
  }
  out.coverage = cond.coverage;

  if (options_.point_memory) {
    // One frame per chunk is enough to keep the map growing.
    const auto last = static_cast<std::size_t>(c.frames - 1);
    const DepthMap depth = options_.depth(out.poses[last], out.frame_times[last]);
    memory_.add(unproject(depth, reference_.intrinsics, out.poses[last], &out.frames[last], i));
  }

  pose_ = out.poses.back();
  ++chunk_;
  consumed_.push_back(cmd);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

RunRecord roam(Session& session, std::span<const InteractionCommand> script) {
  RunRecord run;
  const Episode& ref = session.reference();
  run.width = ref.intrinsics.width;
  run.height = ref.intrinsics.height;
  run.chunk_frames = ref.chunk_frames;
  run.scene_tag = ref.scene_tag;
  run.scene_seed = ref.scene_seed;
  run.difficulty = ref.difficulty;
  run.style = ref.style;
  run.intrinsics = ref.intrinsics;
  run.start = session.pose();
  for (const InteractionCommand& cmd : script) {
    ChunkResult r = session.step(cmd);
    run.commands.push_back(cmd);
    for (auto& f : r.frames) run.frames.push_back(std::move(f));
    run.poses.insert(run.poses.end(), r.poses.begin(), r.poses.end());
    run.frame_times.insert(run.frame_times.end(), r.frame_times.begin(), r.frame_times.end());
    for (auto& m : r.masks) run.masks.push_back(std::move(m));
    run.seconds += r.seconds;
  }
  return run;
}

void save_run(const RunRecord& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["width"] = run.width;
  meta["height"] = run.height;
  meta["K"] = run.chunk_frames;
  meta["scene_tag"] = run.scene_tag;
  meta["scene_seed"] = run.scene_seed;
  meta["difficulty"] = to_string(run.difficulty);
  meta["style"] = to_string(run.style);
  meta["intrinsics"] = intrinsics_to_json(run.intrinsics);
  meta["start"] = pose_to_json(run.start);
  meta["frame_count"] = run.frames.size();
  meta["frame_times"] = run.frame_times;
  meta["seconds"] = run.seconds;
  meta["poses"] = json::array();
  for (const Pose& p : run.poses) meta["poses"].push_back(pose_to_json(p));
  write_text(dir / "meta.json", meta.dump(2));
  save_commands(run.commands, dir / "commands.json");
  std::vector<float> frames;
  std::vector<float> masks;
  for (const Image& f : run.frames) frames.insert(frames.end(), f.data.begin(), f.data.end());
  for (const auto& m : run.masks) {
    for (const std::uint8_t v : m) masks.push_back(v ? 1.0f : 0.0f);
  }
  write_f32(dir / "frames.bin", frames);
  write_f32(dir / "masks.bin", masks);
}

RunRecord load_run(const std::filesystem::path& dir) {
  const json meta = json::parse(read_text(dir / "meta.json"));
  RunRecord run;
  run.width = meta.at("width");
  run.height = meta.at("height");
  run.chunk_frames = meta.at("K");
  run.scene_tag = meta.at("scene_tag");
  run.scene_seed = meta.at("scene_seed");
  run.difficulty = parse_difficulty(meta.at("difficulty").get<std::string>());
  run.style = parse_texture_style(meta.at("style").get<std::string>());
  run.intrinsics = intrinsics_from_json(meta.at("intrinsics"));
  run.start = pose_from_json(meta.at("start"));
  run.frame_times = meta.at("frame_times").get<std::vector<int>>();
  run.seconds = meta.at("seconds");
  for (const json& p : meta.at("poses")) run.poses.push_back(pose_from_json(p));
  run.commands = load_commands(dir / "commands.json");
  const std::size_t n = meta.at("frame_count");
  const std::size_t plane = static_cast<std::size_t>(run.width) * run.height;
  const std::vector<float> frames = read_f32(dir / "frames.bin");
  const std::vector<float> masks = read_f32(dir / "masks.bin");
  if (frames.size() != n * plane * 3 || masks.size() != n * plane || run.poses.size() != n ||
      run.frame_times.size() != n) {
    throw std::runtime_error("load_run: size mismatch in " + dir.string());
  }
  for (std::size_t i = 0; i < n; ++i) {
    Image img(run.width, run.height, 3);
    std::copy_n(frames.begin() + static_cast<std::ptrdiff_t>(i * plane * 3), plane * 3, img.data.begin());
    run.frames.push_back(std::move(img));
    std::vector<std::uint8_t> m(plane);
    for (std::size_t p = 0; p < plane; ++p) m[p] = masks[i * plane + p] > 0.5f ? 1 : 0;
    run.masks.push_back(std::move(m));
  }
  return run;
}

json to_json(const RunMetrics& m) {
  return {{"masked_psnr", m.masked_psnr},
          {"psnr_capped", m.psnr_capped},
          {"coverage", m.coverage},
          {"trajectory_error", {{"rot_deg", m.trajectory.rot_deg}, {"trans", m.trajectory.trans}}},
          {"chunks_per_sec", m.chunks_per_sec},
          {"chunks", m.chunks}};
}

double masked_psnr(std::span<const Image> frames, std::span<const Image> truth,
                   std::span<const std::vector<std::uint8_t>> masks, bool* capped) {
  if (frames.size() != truth.size() || frames.size() != masks.size()) {
    throw std::invalid_argument("masked_psnr: mismatched lengths");
  }
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Image& a = frames[i];
    const Image& b = truth[i];
    if (a.width != b.width || a.height != b.height || a.channels != b.channels || masks[i].size() != a.pixel_count()) {
      throw std::invalid_argument("masked_psnr: mismatched frame sizes");
    }
    for (std::size_t p = 0; p < a.pixel_count(); ++p) {
      if (!masks[i][p]) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = a.data[p * a.channels + c] - b.data[p * b.channels + c];
        sum += d * d;
        ++n;
      }
    }
  }
  if (capped) *capped = false;
  if (n == 0) return 0.0;
  const double mse = sum / static_cast<double>(n);
  const double psnr = mse > 0 ? 10.0 * std::log10(1.0 / mse) : kPsnrCap;
  if (psnr >= kPsnrCap) {
    if (capped) *capped = true;
    return kPsnrCap;
  }
  return psnr;
}

std::vector<Image> oracle_frames(const RunRecord& run, const SceneSpec& scene) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < run.poses.size(); ++i) out.push_back(render(scene, run.poses[i], run.intrinsics, run.frame_times[i]).frame);
  return out;
}

RunMetrics evaluate_run(const RunRecord& run, const SceneSpec& scene) {
  if (run.frames.size() != run.poses.size() || run.frames.size() != run.masks.size() ||
      run.frames.size() != run.commands.size() * static_cast<std::size_t>(run.chunk_frames)) {
    throw std::invalid_argument("evaluate_run: mismatched lengths");
  }
  RunMetrics m;
  m.chunks = run.chunks();
  const std::vector<Image> truth = oracle_frames(run, scene);
  m.masked_psnr = masked_psnr(run.frames, truth, run.masks, &m.psnr_capped);
  std::size_t covered = 0;
  std::size_t total = 0;
  for (const auto& mask : run.masks) {
    covered += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    total += mask.size();
  }
  m.coverage = total ? static_cast<double>(covered) / static_cast<double>(total) : 0.0;
  const std::vector<Pose> commanded = command_trajectory(run.start, run.commands, run.chunk_frames);
  m.trajectory = trajectory_error(run.poses, commanded);
  m.chunks_per_sec = run.seconds > 0 ? m.chunks / run.seconds : 0.0;
  return m;
}

std::vector<Image> copy_last_frame_baseline(const RunRecord& run, const SceneSpec& scene) {
  std::vector<Image> out;
  Image last = render(scene, run.start, run.intrinsics, 0).frame;
  const auto k = static_cast<std::size_t>(run.chunk_frames);
  for (std::size_t i = 0; i < run.poses.size(); ++i) {
    if (i > 0 && i % k == 0) last = render(scene, run.poses[i - 1], run.intrinsics, run.frame_times[i - 1]).frame;
    out.push_back(last);
  }
  return out;
}

}  // namespace star
