// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/stcache.hpp"

#include <stdexcept>

namespace star {

BlockKV detach(const BlockKV& kv) {
  BlockKV out;
  out.kind = kv.kind;
  for (const LayerKV& l : kv.layers) out.layers.push_back({ag::detach(l.key), ag::detach(l.value)});
  return out;
}

STCache::STCache(const DenoiserConfig& config) : config_(config) {
  if (!config.valid()) throw std::invalid_argument("STCache: invalid config");
}

void STCache::check(const BlockKV& kv) const {
  if (kv.layers.size() != static_cast<std::size_t>(config_.layers)) {
    throw std::invalid_argument("STCache: block has the wrong layer count");
  }
  for (const LayerKV& l : kv.layers) {
    for (const ag::Var* v : {&l.key, &l.value}) {
      if (!v->defined() || v->rows() != config_.tokens() || v->cols() != config_.width) {
        throw std::invalid_argument("STCache: block shape does not match config");
      }
    }
  }
}

void STCache::set_reference(const BlockKV& kv) {
  check(kv);
  reference_ = detach(kv);
  reference_->kind = BlockKind::reference;
}

void STCache::clear_reference() { reference_.reset(); }

std::optional<HistoryEntry> STCache::append_history(const BlockKV& kv, int chunk_index, std::uint64_t rng_cursor) {
  check(kv);
  if (!history_.empty() && chunk_index <= history_.back().chunk_index) {
    throw std::invalid_argument("STCache: chunk index must increase");
  }
  std::optional<HistoryEntry> evicted;
  if (config_.history_window == 0) return HistoryEntry{detach(kv), chunk_index, rng_cursor};
  history_.push_back({detach(kv), chunk_index, rng_cursor});
  history_.back().kv.kind = BlockKind::history;
  if (static_cast<int>(history_.size()) > config_.history_window) {
    evicted = std::move(history_.front());
    history_.pop_front();
  }
  return evicted;
}

CacheView STCache::view() const {
  CacheView v;
  v.reference = reference();
  for (auto it = history_.rbegin(); it != history_.rend(); ++it) v.history.push_back(&it->kv);
  return v;
}

std::vector<int> STCache::entry_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(config_.layers), 0);
  for (int l = 0; l < config_.layers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    if (reference_ && i < reference_->layers.size()) ++counts[i];
    for (const HistoryEntry& e : history_) {
      if (i < e.kv.layers.size()) ++counts[i];
    }
  }
  return counts;
}

std::size_t STCache::stored_scalars() const {
  std::size_t n = 0;
  auto add = [&](const BlockKV& b) {
    for (const LayerKV& l : b.layers) n += static_cast<std::size_t>(l.key.value().size() + l.value.value().size());
  };
  if (reference_) add(*reference_);
  for (const HistoryEntry& e : history_) add(e.kv);
  return n;
}

nlohmann::json STCache::debug_dump() const {
  nlohmann::json layers = nlohmann::json::array();
  const PositionBands bands = PositionBands::standard(config_);
  for (int l = 0; l < config_.layers; ++l) {
    nlohmann::json entries = nlohmann::json::array();
    if (reference_) {
      entries.push_back({{"kind", "reference"}, {"tokens", config_.tokens()}, {"position_start", bands.reference_start}});
    }
    // Slot 0 is the most recent block.
    for (std::size_t s = 0; s < history_.size(); ++s) {
      const HistoryEntry& e = history_[history_.size() - 1 - s];
      entries.push_back({{"kind", "history"},
                         {"chunk_index", e.chunk_index},
                         {"rng_cursor", e.rng_cursor},
                         {"tokens", config_.tokens()},
                         {"position_start", bands.history_start + static_cast<int>(s) * config_.tokens()}});
    }
    layers.push_back({{"layer", l}, {"entries", entries}});
  }
  return {{"capacity", config_.history_window}, {"layers", layers}};
}

namespace {

void check_program(const ChunkProgram& p) {
  if (p.chunks <= 0 || !p.generate || !p.loss || !p.commit) {
    throw std::invalid_argument("ChunkProgram: needs chunks > 0 and generate/loss/commit");
  }
}

std::uint64_t cursor(const ChunkProgram& p, int chunk) { return p.rng_cursor ? p.rng_cursor(chunk) : 0; }

}  // namespace

ReplayResult plan_and_replay(STCache& cache, const ChunkProgram& program) {
  check_program(program);
  ReplayResult result;
  result.plan.total_chunks = program.chunks;

  {
    ag::NoGradGuard no_grad;
    for (int j = 0; j < program.chunks; ++j) {
      result.plan.chunks.push_back({j, cursor(program, j), cache});
      const ag::Var out = program.generate(j, cache.view());
      result.outputs.push_back(out.value());
      cache.append_history(program.commit(j, out), j, cursor(program, j));
    }
  }

  const std::size_t base = ag::ActivationMeter::current();
  ag::ActivationMeter::reset_peak();
  for (const RecomputePlan::Chunk& c : result.plan.chunks) {
    double loss = 0.0;
    {
      const ag::Var out = program.generate(c.index, c.snapshot.view());
      const auto idx = static_cast<std::size_t>(c.index);
      const double div = (out.value() - result.outputs[idx]).cwiseAbs().maxCoeff();
      result.replay_divergence = std::max(result.replay_divergence, div);
      if (!(div <= kReplayTolerance)) {
        throw std::runtime_error("plan_and_replay: chunk " + std::to_string(c.index) + " diverged on replay by " +
                                 std::to_string(div));
      }
      const ag::Var l = program.loss(c.index, out);
      loss = l.value()(0, 0);
      ag::backward(l);
    }
    result.losses.push_back(loss);
  }
  result.peak_activations = ag::ActivationMeter::peak() - std::min(base, ag::ActivationMeter::peak());
  return result;
}

ReplayResult full_graph_backprop(STCache& cache, const ChunkProgram& program) {
  check_program(program);
  ReplayResult result;
  result.plan.total_chunks = program.chunks;
  const std::size_t base = ag::ActivationMeter::current();
  ag::ActivationMeter::reset_peak();
  std::vector<ag::Var> losses;
  for (int j = 0; j < program.chunks; ++j) {
    const ag::Var out = program.generate(j, cache.view());
    result.outputs.push_back(out.value());
    losses.push_back(program.loss(j, out));
    result.losses.push_back(losses.back().value()(0, 0));
    cache.append_history(program.commit(j, out), j, cursor(program, j));
  }
  ag::backward(ag::sum_all(losses));
  result.peak_activations = ag::ActivationMeter::peak() - std::min(base, ag::ActivationMeter::peak());
  return result;
}

}  // namespace star
