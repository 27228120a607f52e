// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/stcache.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace star {
namespace {

using ag::Mat;

DenoiserConfig tiny(int window = 1) {
  DenoiserConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 16;
  c.patch = 4;
  c.frames = 2;
  c.image_width = 8;
  c.image_height = 8;
  c.noise_features = 8;
  c.history_window = window;
  return c;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Mat m(r, c);
  NoiseStream(seed, 0, 0, "test").fill_normal(m);
  return m;
}

BlockKV block(const Denoiser& d, std::uint64_t seed) {
  const DenoiserConfig& c = d.config();
  return d.encode(ag::constant(random_mat(c.tokens(), c.patch_dim(), seed)), BlockKind::history, 0);
}

TEST(STCache, RingEvictsOldestFirst) {
  const DenoiserConfig c = tiny(2);
  Denoiser d(c, 1);
  STCache cache(c);
  EXPECT_FALSE(cache.append_history(block(d, 1), 1).has_value());
  EXPECT_FALSE(cache.append_history(block(d, 2), 2).has_value());
  const auto evicted = cache.append_history(block(d, 3), 3);
  ASSERT_TRUE(evicted.has_value());
  EXPECT_EQ(evicted->chunk_index, 1);
  ASSERT_EQ(cache.history().size(), 2u);
  EXPECT_EQ(cache.history()[0].chunk_index, 2);
  EXPECT_EQ(cache.history()[1].chunk_index, 3);
  // The view lists the most recent block first.
  EXPECT_EQ(cache.view().history.front(), &cache.history()[1].kv);
  EXPECT_THROW(cache.append_history(block(d, 4), 3), std::invalid_argument);
}

TEST(STCache, ReferenceSlot) {
  const DenoiserConfig c = tiny(2);
  Denoiser d(c, 1);
  STCache cache(c);
  cache.append_history(block(d, 1), 0);
  const BlockKV ref = block(d, 9);
  cache.set_reference(ref);
  const auto counts = cache.entry_counts();
  cache.set_reference(ref);
  EXPECT_EQ(cache.entry_counts(), counts);
  EXPECT_EQ(counts, std::vector<int>(2, 2));
  ASSERT_TRUE(cache.has_reference());
  for (std::size_t l = 0; l < ref.layers.size(); ++l) {
    EXPECT_EQ(cache.reference()->layers[l].key.value(), ref.layers[l].key.value());
    EXPECT_EQ(cache.reference()->layers[l].value.value(), ref.layers[l].value.value());
  }
  EXPECT_EQ(cache.history().size(), 1u);

  DenoiserConfig other = c;
  other.width = 8;
  Denoiser wrong(other, 1);
  EXPECT_THROW(cache.set_reference(block(wrong, 1)), std::invalid_argument);
}

TEST(STCache, ConstantMemoryOverThousandAppends) {
  const DenoiserConfig c = tiny(2);
  Denoiser d(c, 1);
  STCache cache(c);
  cache.set_reference(block(d, 100));
  const BlockKV b = block(d, 1);
  std::size_t scalars = 0;
  for (int i = 0; i < 1000; ++i) {
    cache.append_history(b, i);
    if (i == 1) scalars = cache.stored_scalars();
  }
  EXPECT_EQ(cache.entry_counts(), std::vector<int>(2, c.history_window + 1));
  EXPECT_EQ(cache.stored_scalars(), scalars);
  EXPECT_EQ(cache.history().front().chunk_index, 998);
}

TEST(STCache, DebugDump) {
  const DenoiserConfig c = tiny(2);
  Denoiser d(c, 1);
  STCache cache(c);
  cache.set_reference(block(d, 1));
  cache.append_history(block(d, 2), 5, 77);
  cache.append_history(block(d, 3), 6, 78);
  const auto j = cache.debug_dump();
  EXPECT_EQ(j["capacity"], 2);
  ASSERT_EQ(j["layers"].size(), 2u);
  const auto& e = j["layers"][0]["entries"];
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0]["kind"], "reference");
  EXPECT_EQ(e[1]["chunk_index"], 6);
  EXPECT_EQ(e[2]["rng_cursor"], 77);
  EXPECT_EQ(e[2]["position_start"].get<int>(), e[1]["position_start"].get<int>() + c.tokens());
}

// The same block cached after 2 chunks or after 200 chunks is read at the
// same band positions, so logits against it are bit-identical.
TEST(STCache, PositionFixingAcrossChunkCounts) {
  const DenoiserConfig c = tiny(1);
  Denoiser d(c, 5);
  const BlockKV target = block(d, 42);
  STCache early(c), late(c);
  for (int i = 0; i < 2; ++i) early.append_history(block(d, 1000 + i), i);
  early.append_history(target, 2);
  for (int i = 0; i < 200; ++i) late.append_history(block(d, 2000 + i % 3), i);
  late.append_history(target, 200);

  const Mat q = random_mat(c.tokens(), c.width, 7);
  const PositionBands bands = d.bands();
  const auto qpos = assign_positions(BlockKind::current, bands, c.tokens());
  const auto kpos = assign_positions(BlockKind::history, bands, c.tokens(), 0);
  for (int l = 0; l < c.layers; ++l) {
    const Mat& ke = early.view().history[0]->layers[static_cast<std::size_t>(l)].key.value();
    const Mat& kl = late.view().history[0]->layers[static_cast<std::size_t>(l)].key.value();
    for (int h = 0; h < c.heads; ++h) {
      EXPECT_EQ(ag::rope_logits(q, qpos, ke, kpos, c.heads, h, c.rope_base),
                ag::rope_logits(q, qpos, kl, kpos, c.heads, h, c.rope_base));
    }
  }
  const auto x = ag::constant(random_mat(c.tokens(), c.patch_dim(), 8));
  EXPECT_EQ(d.denoise(x, 0.4, early.view(), nullptr, 0).value(), d.denoise(x, 0.4, late.view(), nullptr, 0).value());
}

struct Toy {
  DenoiserConfig config = tiny(1);
  Denoiser model{config, 17};
  std::vector<Mat> targets;
  Mat geometry;

  explicit Toy(int chunks) {
    for (int j = 0; j < chunks; ++j) targets.push_back(random_mat(config.tokens(), config.patch_dim(), 300 + j));
    geometry = random_mat(config.tokens(), config.geometry_dim(), 299).cwiseAbs().cwiseMin(1.0);
  }

  ChunkProgram program() {
    ChunkProgram p;
    p.chunks = static_cast<int>(targets.size());
    p.generate = [this](int j, const CacheView& view) {
      return sample_chunk(model, view, &geometry, 1, NoiseSchedule::student_default(), 5, j);
    };
    p.loss = [this](int j, const ag::Var& out) { return ag::mse(out, targets[static_cast<std::size_t>(j)]); };
    p.commit = [this](int, const ag::Var& out) { return model.encode(out, BlockKind::history, 1); };
    p.rng_cursor = [](int j) { return stream_key(5, j, 0, "sample"); };
    return p;
  }

  std::vector<Mat> grads_after(ReplayResult (*run)(STCache&, const ChunkProgram&)) {
    for (ag::Parameter* p : model.parameters()) p->zero_grad();
    STCache cache(config);
    cache.set_reference(model.encode(ag::constant(random_mat(config.tokens(), config.patch_dim(), 298)),
                                     BlockKind::reference, 1));
    run(cache, program());
    std::vector<Mat> g;
    for (ag::Parameter* p : model.parameters()) g.push_back(p->grad);
    return g;
  }
};

double relative_error(const std::vector<Mat>& a, const std::vector<Mat>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]).squaredNorm();
    den += b[i].squaredNorm();
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

TEST(PlanAndReplay, SingleChunkEqualsFullGraph) {
  Toy toy(1);
  const auto chunked = toy.grads_after(plan_and_replay);
  const auto full = toy.grads_after(full_graph_backprop);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_EQ(chunked[i], full[i]);
}

TEST(PlanAndReplay, TwoChunksMatchFullGraph) {
  Toy toy(2);
  const auto chunked = toy.grads_after(plan_and_replay);
  const auto full = toy.grads_after(full_graph_backprop);
  EXPECT_LE(relative_error(chunked, full), 1e-4);
  // Key/value projections see gradient through the replayed chunk itself.
  for (const ag::Parameter* p : toy.model.parameters()) {
    if (p->name.ends_with(".wk") || p->name.ends_with(".wv")) {
      EXPECT_GT(p->grad.cwiseAbs().maxCoeff(), 0.0) << p->name;
    }
  }
}

TEST(PlanAndReplay, PeakActivationsBoundedByOneChunk) {
  auto peak = [](int chunks) {
    Toy toy(chunks);
    STCache cache(toy.config);
    return plan_and_replay(cache, toy.program()).peak_activations;
  };
  const std::size_t one = peak(1);
  const std::size_t eight = peak(8);
  EXPECT_GT(one, 0u);
  EXPECT_LE(static_cast<double>(eight), 1.1 * static_cast<double>(one));

  Toy toy(8);
  STCache cache(toy.config);
  EXPECT_GT(full_graph_backprop(cache, toy.program()).peak_activations, 4 * one);
}

TEST(PlanAndReplay, RecordsPlanAndEndsInPostRunState) {
  Toy toy(3);
  STCache cache(toy.config);
  const ReplayResult r = plan_and_replay(cache, toy.program());
  EXPECT_EQ(r.plan.total_chunks, 3);
  ASSERT_EQ(r.plan.chunks.size(), 3u);
  EXPECT_TRUE(r.plan.chunks[0].snapshot.history().empty());
  EXPECT_EQ(r.plan.chunks[2].snapshot.history().back().chunk_index, 1);
  EXPECT_EQ(r.plan.chunks[1].rng_cursor, stream_key(5, 1, 0, "sample"));
  EXPECT_EQ(cache.history().back().chunk_index, 2);
  EXPECT_LE(r.replay_divergence, kReplayTolerance);
  EXPECT_EQ(r.losses.size(), 3u);
}

TEST(PlanAndReplay, NondeterministicProgramIsRejected) {
  Toy toy(2);
  ChunkProgram p = toy.program();
  int calls = 0;
  p.generate = [&](int j, const CacheView& view) {
    return sample_chunk(toy.model, view, nullptr, 1, NoiseSchedule::student_default(), 5 + calls++, j);
  };
  STCache cache(toy.config);
  EXPECT_THROW(plan_and_replay(cache, p), std::runtime_error);
}

}  // namespace
}  // namespace star
