// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Block transformer that predicts a clean chunk from its noisy version. The
// current chunk attends over [reference ∥ history ∥ itself]; geometry (a warp
// and its validity mask) enters through the current block's input
// projection, and rotary positions come from fixed per-kind bands.
//
// Latents are patchified pixels mapped to [-1, 1]; token j of a chunk is
// frame j / P, patch j % P in row-major patch order, and a token's features
// are ordered (dy, dx, channel).

#pragma once

#include "star/autograd.hpp"
#include "star/geometry.hpp"
#include "star/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace star {

struct DenoiserConfig {
  int layers = 2;
  int heads = 4;
  int width = 64;
  int patch = 8;
  int frames = 4;
  int history_window = 1;
  double rope_base = 10000.0;
  int image_width = 64;
  int image_height = 64;
  int channels = 3;
  int tags = 4;
  int mlp_ratio = 4;
  int noise_features = 16;
  double sigma_data = 0.5;

  int patches_per_frame() const { return (image_width / patch) * (image_height / patch); }
  int tokens() const { return frames * patches_per_frame(); }
  int patch_dim() const { return patch * patch * channels; }
  /// Warped image channels plus one mask channel per pixel.
  int geometry_dim() const { return patch * patch * (channels + 1); }
  bool valid() const;
  bool operator==(const DenoiserConfig&) const = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

enum class BlockKind { current, history, reference };

/// One chunk of K frames as tokens (K·P × patch_dim).
struct LatentBlock {
  ag::Mat tokens;
  int chunk_index = 0;
  BlockKind kind = BlockKind::current;
};

struct NoiseSchedule {
  /// Strictly decreasing, all positive; the last step returns the model's
  /// σ = 0 estimate.
  std::vector<double> sigmas;

  static NoiseSchedule geometric(int count, double sigma_max, double sigma_min);
  /// Few-step default used by students.
  static NoiseSchedule student_default();
  /// Longer schedule used by teachers and for fake-score noise levels.
  static NoiseSchedule teacher_default();
  int count() const { return static_cast<int>(sigmas.size()); }
  bool valid() const;
};

struct PositionBands {
  int current_start = 0;
  int reference_start = 0;
  int history_start = 0;

  static PositionBands standard(const DenoiserConfig& c);
  /// Each band [start, start + K·P) pairwise disjoint; history slots extend
  /// the history band by W blocks.
  bool valid(const DenoiserConfig& c) const;
};

/// Token positions for a block: band start + j. `slot` selects the history
/// slot (0 = most recent) and is ignored for other kinds.
std::vector<int> assign_positions(BlockKind kind, const PositionBands& bands, int tokens, int slot = 0);

struct KeySegment {
  BlockKind kind;
  int tokens;
};

/// Boolean (query × key) visibility for the current block over key segments
/// listed as [reference, history…, current]. Cached segments only provide
/// keys; the current block sees everything.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> attention_mask(std::span<const KeySegment> layout,
                                                                    int query_tokens);

ag::Mat patchify(std::span<const Image> frames, int patch);
std::vector<Image> unpatchify(const ag::Mat& tokens, int frames, int width, int height, int channels, int patch);
/// Geometry channels from per-frame warps: warped pixels (zero where
/// uncovered) and the mask, patchified like the frames.
ag::Mat patchify_geometry(std::span<const WarpResult> warps, int patch);

/// Pre-rotary keys and values of one cached block, per layer.
struct LayerKV {
  ag::Var key;
  ag::Var value;
};
struct BlockKV {
  std::vector<LayerKV> layers;
  BlockKind kind = BlockKind::history;
};

/// What the current chunk may attend to besides itself.
struct CacheView {
  const BlockKV* reference = nullptr;
  /// Most recent first.
  std::vector<const BlockKV*> history;
};

class DenoiserModel {
 public:
  virtual ~DenoiserModel() = default;
  virtual const DenoiserConfig& config() const = 0;
  /// Keys/values of a clean block (σ = 0, zero geometry) for the cache.
  virtual BlockKV encode(const ag::Var& clean_tokens, BlockKind kind, int tag) const = 0;
  /// x0 estimate of the current chunk. geometry may be null (all zero).
  virtual ag::Var denoise(const ag::Var& noisy, double sigma, const CacheView& cache, const ag::Mat* geometry,
                          int tag) const = 0;
};

struct CheckpointInfo {
  std::string stage = "none";
  std::uint64_t seed = 0;
  long step = 0;
};

class Denoiser final : public DenoiserModel {
 public:
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const override { return config_; }
  BlockKV encode(const ag::Var& clean_tokens, BlockKind kind, int tag) const override;
  ag::Var denoise(const ag::Var& noisy, double sigma, const CacheView& cache, const ag::Mat* geometry,
                  int tag) const override;

  const PositionBands& bands() const { return bands_; }
  std::vector<ag::Parameter*> parameters();
  std::vector<const ag::Parameter*> parameters() const;
  std::size_t parameter_count() const;
  /// Sets every weight to zero except the output bias.
  void zero_except_output_bias(const ag::RowVec& bias);
  void copy_from(const Denoiser& other);
  bool same_weights(const Denoiser& other) const;

  CheckpointInfo info;

  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<Denoiser> load(const std::filesystem::path& dir);

  /// Largest |value| seen in the geometry channels of non-current inputs
  /// since the last reset (instrumentation for the zero-padding rule).
  static double non_current_geometry_peak();
  static void reset_geometry_audit();

 private:
  struct Weights;

  ag::Var embed(const ag::Var& x, const ag::Mat& geometry, double sigma, int tag) const;

  DenoiserConfig config_;
  PositionBands bands_;
  ag::Mat fourier_freqs_;
  // Held by pointer so const inference paths can still route gradients into
  // the parameters.
  std::unique_ptr<Weights> w_;

 public:
  ~Denoiser() override;
};

/// Samples one chunk with the few-step loop x ← x0 + σ_{k+1}ε. Noise is
/// drawn from (seed, chunk, step). Only the final denoise call records a
/// graph when grad_last_only is set.
ag::Var sample_chunk(const DenoiserModel& model, const CacheView& cache, const ag::Mat* geometry, int tag,
                     const NoiseSchedule& schedule, std::uint64_t seed, int chunk, bool grad_last_only = true);

/// The noisy input to the final denoise call of sample_chunk, computed
/// without a graph. sample_chunk with grad_last_only equals one denoise of
/// this at the last sigma.
ag::Mat sample_prefix(const DenoiserModel& model, const CacheView& cache, const ag::Mat* geometry, int tag,
                      const NoiseSchedule& schedule, std::uint64_t seed, int chunk);

}  // namespace star
