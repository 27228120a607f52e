// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Key/value store for streaming generation: one reference anchor plus a ring
// of the W most recent history blocks, and the two-stage scheduler that
// trains through long autoregressive runs with one chunk of activations.

#pragma once

#include "star/denoiser.hpp"

#include <json.hpp>

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

namespace star {

struct HistoryEntry {
  BlockKV kv;
  int chunk_index = 0;
  /// Noise stream key that produced the block, kept for replay audits.
  std::uint64_t rng_cursor = 0;
};

/// Entries are stored detached: later chunks read them as constants.
class STCache {
 public:
  explicit STCache(const DenoiserConfig& config);

  void set_reference(const BlockKV& kv);
  void clear_reference();
  /// Throws unless chunk_index is greater than every stored index. Returns
  /// the evicted entry once the window is full.
  std::optional<HistoryEntry> append_history(const BlockKV& kv, int chunk_index, std::uint64_t rng_cursor = 0);

  /// Reference first, history most recent first.
  CacheView view() const;

  bool has_reference() const { return reference_.has_value(); }
  const BlockKV* reference() const { return reference_ ? &*reference_ : nullptr; }
  /// Oldest first.
  const std::deque<HistoryEntry>& history() const { return history_; }
  int capacity() const { return config_.history_window; }
  /// Stored blocks per layer (reference + history), one count per layer.
  std::vector<int> entry_counts() const;
  /// Scalars held across all stored keys and values.
  std::size_t stored_scalars() const;

  /// Per-layer entry metadata for debugging.
  nlohmann::json debug_dump() const;

 private:
  void check(const BlockKV& kv) const;

  DenoiserConfig config_;
  std::optional<BlockKV> reference_;
  std::deque<HistoryEntry> history_;
};

/// Detached copy of a block's keys and values.
BlockKV detach(const BlockKV& kv);

/// A deterministic autoregressive run split into chunks. Each callback must
/// depend only on its arguments and fixed state (noise drawn by chunk index).
struct ChunkProgram {
  int chunks = 0;
  /// Produces the chunk's output tokens given the cache.
  std::function<ag::Var(int chunk, const CacheView& cache)> generate;
  /// Scalar training loss for one chunk's output.
  std::function<ag::Var(int chunk, const ag::Var& output)> loss;
  /// Key/values written to the cache after the chunk (stored detached).
  std::function<BlockKV(int chunk, const ag::Var& output)> commit;
  /// Noise key recorded in the plan and in the history ring.
  std::function<std::uint64_t(int chunk)> rng_cursor;
};

struct RecomputePlan {
  struct Chunk {
    int index = 0;
    std::uint64_t rng_cursor = 0;
    /// Cache state the chunk was generated against.
    STCache snapshot;
  };
  std::vector<Chunk> chunks;
  int total_chunks = 0;
};

struct ReplayResult {
  std::vector<ag::Mat> outputs;
  std::vector<double> losses;
  /// Largest |stage-2 output − stage-1 output| over all chunks.
  double replay_divergence = 0.0;
  /// Peak activation count seen during stage 2.
  std::size_t peak_activations = 0;
  RecomputePlan plan;
};

inline constexpr double kReplayTolerance = 1e-5;

/// Stage 1 runs the whole program without a graph and snapshots the cache
/// before every chunk. Stage 2 replays each chunk from its snapshot with a
/// graph, backpropagates its loss into parameter grads, and frees the graph
/// before the next chunk. Throws if a replay diverges beyond tolerance.
/// The cache ends in its post-run state.
ReplayResult plan_and_replay(STCache& cache, const ChunkProgram& program);

/// Oracle: the same run recorded as one graph, with cached entries read as
/// constants exactly as in replay, and a single backward over the summed loss.
ReplayResult full_graph_backprop(STCache& cache, const ChunkProgram& program);

}  // namespace star
