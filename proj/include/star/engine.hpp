// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Streaming generation: each step maps a command to the chunk's frame poses,
// builds the reference and warp conditions, denoises against the cache and
// decodes K frames. Also the run-evaluation harness and its baselines.

#pragma once

#include "star/denoiser.hpp"
#include "star/microworld.hpp"
#include "star/stcache.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>

namespace star {

/// Reference chunk used at chunk i: index-aligned, clamped to the last one.
int select_reference(int chunk, int reference_chunks);

/// Bounded world-space store of generated content. Oldest source chunks are
/// evicted first.
class PointCloudMemory {
 public:
  explicit PointCloudMemory(std::size_t budget = 100000) : budget_(budget) {}

  void add(std::span<const WorldPoint> points);
  std::size_t size() const { return points_.size(); }
  std::size_t budget() const { return budget_; }
  const std::deque<WorldPoint>& points() const { return points_; }

 private:
  std::size_t budget_;
  std::deque<WorldPoint> points_;
};

struct ConditionOptions {
  bool reference = true;
  bool geometry = true;
};

/// Conditions for one chunk.
struct ChunkCondition {
  /// -1 when the reference is disabled.
  int reference_chunk = -1;
  ag::Mat reference_tokens;
  /// Patchified warps (zero when geometry is disabled).
  ag::Mat geometry;
  std::vector<WarpResult> warps;
  /// Mean mask coverage over the chunk's frames.
  double coverage = 0.0;
};

/// Reference tokens for chunk r of an episode.
ag::Mat chunk_tokens(const Episode& ep, int chunk, int patch);

/// Warps the index-aligned frame of the selected reference chunk into each
/// target frame, splats point memory into the same z-buffer when given, and
/// drops pixels that show through gaps in nearer surfaces.
ChunkCondition build_condition(const DenoiserConfig& config, const Episode& reference, int chunk,
                               std::span<const Pose> frame_poses, const ConditionOptions& options,
                               const PointCloudMemory* memory = nullptr);

/// Depth for a camera pose at frame time t (the oracle renderer at desk scale).
using DepthProvider = std::function<DepthMap(const Pose& pose, int t)>;
DepthProvider oracle_depth(const SceneSpec& scene, const Intrinsics& k);

struct SessionOptions {
  NoiseSchedule schedule = NoiseSchedule::student_default();
  std::uint64_t seed = 0;
  ConditionOptions conditions;
  StepConfig step;
  /// Pose before the first chunk.
  Pose start = start_pose();
  bool point_memory = false;
  std::size_t point_budget = 100000;
  /// Required when point_memory is set.
  DepthProvider depth;
};

struct ChunkResult {
  int index = 0;
  InteractionCommand command;
  std::vector<Image> frames;
  std::vector<Pose> poses;
  std::vector<int> frame_times;
  /// Warp masks per frame.
  std::vector<std::vector<std::uint8_t>> masks;
  double coverage = 0.0;
  double seconds = 0.0;
};

class Session {
 public:
  Session(const DenoiserModel& student, Episode reference, SessionOptions options = {});

  ChunkResult step(const InteractionCommand& cmd);

  const Pose& pose() const { return pose_; }
  int chunk_index() const { return chunk_; }
  const STCache& cache() const { return cache_; }
  const PointCloudMemory& memory() const { return memory_; }
  const Episode& reference() const { return reference_; }
  /// Commands consumed so far, in order.
  const std::vector<InteractionCommand>& consumed() const { return consumed_; }
  /// Holds dynamic-scene time while set; frames keep the last time index.
  void set_freeze(bool on) { freeze_ = on; }
  bool frozen() const { return freeze_; }

 private:
  const DenoiserModel& student_;
  Episode reference_;
  SessionOptions options_;
  STCache cache_;
  PointCloudMemory memory_;
  Pose pose_;
  int chunk_ = 0;
  int time_ = 0;
  bool freeze_ = false;
  int cached_reference_ = -1;
  std::vector<InteractionCommand> consumed_;
};

/// A finished roaming run as stored on disk.
struct RunRecord {
  int width = 0;
  int height = 0;
  int chunk_frames = 0;
  int scene_tag = 0;
  std::uint64_t scene_seed = 0;
  Difficulty difficulty = Difficulty::static_scene;
  TextureStyle style = TextureStyle::sharp;
  Intrinsics intrinsics;
  Pose start;
  std::vector<InteractionCommand> commands;
  std::vector<Image> frames;
  std::vector<Pose> poses;
  std::vector<int> frame_times;
  std::vector<std::vector<std::uint8_t>> masks;
  double seconds = 0.0;

  int chunks() const { return chunk_frames > 0 ? static_cast<int>(frames.size()) / chunk_frames : 0; }
};

/// Runs a scripted roam and collects the record.
RunRecord roam(Session& session, std::span<const InteractionCommand> script);

void save_run(const RunRecord& run, const std::filesystem::path& dir);
RunRecord load_run(const std::filesystem::path& dir);

inline constexpr double kPsnrCap = 99.0;

struct RunMetrics {
  /// PSNR over warp-covered pixels; kPsnrCap when the error is zero.
  double masked_psnr = 0.0;
  bool psnr_capped = false;
  double coverage = 0.0;
  TrajectoryError trajectory;
  double chunks_per_sec = 0.0;
  int chunks = 0;
};

nlohmann::json to_json(const RunMetrics& m);

/// PSNR over masked pixels of frame lists (equal lengths and sizes).
double masked_psnr(std::span<const Image> frames, std::span<const Image> truth,
                   std::span<const std::vector<std::uint8_t>> masks, bool* capped = nullptr);

/// Oracle renders along the run's poses and frame times.
std::vector<Image> oracle_frames(const RunRecord& run, const SceneSpec& scene);

/// Masked PSNR against oracle renders, coverage, trajectory error of the
/// command fold against the commanded trajectory, and throughput.
RunMetrics evaluate_run(const RunRecord& run, const SceneSpec& scene);

/// Each chunk repeats the true last frame of the previous chunk (chunk 0
/// repeats the view at the start pose).
std::vector<Image> copy_last_frame_baseline(const RunRecord& run, const SceneSpec& scene);

}  // namespace star
