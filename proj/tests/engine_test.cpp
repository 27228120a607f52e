// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/engine.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace star {
namespace {

using ag::Mat;

DenoiserConfig small_config(int size = 32) {
  DenoiserConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 16;
  c.patch = 8;
  c.frames = 4;
  c.image_width = size;
  c.image_height = size;
  c.noise_features = 8;
  return c;
}

// Perfectly trained stand-in: returns the warped frame on covered pixels and
// black elsewhere, whatever the noise.
class WarpCopyModel final : public DenoiserModel {
 public:
  explicit WarpCopyModel(DenoiserConfig c) : config_(c) {}
  const DenoiserConfig& config() const override { return config_; }
  BlockKV encode(const ag::Var&, BlockKind kind, int) const override {
    BlockKV b;
    b.kind = kind;
    for (int l = 0; l < config_.layers; ++l) {
      b.layers.push_back({ag::constant(Mat::Zero(config_.tokens(), config_.width)),
                          ag::constant(Mat::Zero(config_.tokens(), config_.width))});
    }
    return b;
  }
  ag::Var denoise(const ag::Var&, double, const CacheView&, const Mat* geometry, int) const override {
    const int ch = config_.channels;
    Mat out(config_.tokens(), config_.patch_dim());
    for (Eigen::Index t = 0; t < out.rows(); ++t) {
      for (int p = 0; p < config_.patch * config_.patch; ++p) {
        const bool covered = geometry && (*geometry)(t, p * (ch + 1) + ch) > 0.5;
        for (int c = 0; c < ch; ++c) out(t, p * ch + c) = covered ? 2.0 * (*geometry)(t, p * (ch + 1) + c) - 1.0 : -1.0;
      }
    }
    return ag::constant(out);
  }

 private:
  DenoiserConfig config_;
};

Episode reference_walk(std::uint64_t seed, int size, int chunks, Difficulty d = Difficulty::static_scene) {
  DatasetOptions o;
  o.width = o.height = size;
  o.chunks = chunks;
  o.difficulty = d;
  return make_pair(seed, o).reference;
}

TEST(SelectReference, ClampsAndIsMonotone) {
  EXPECT_EQ(select_reference(0, 4), 0);
  EXPECT_EQ(select_reference(9, 4), 3);
  int prev = 0;
  for (int i = 0; i < 20; ++i) {
    const int r = select_reference(i, 5);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_THROW(select_reference(0, 0), std::invalid_argument);
}

TEST(PointCloudMemory, BudgetHoldsOverManyChunks) {
  PointCloudMemory mem(1000);
  for (int chunk = 0; chunk < 500; ++chunk) {
    std::vector<WorldPoint> pts(37);
    for (auto& p : pts) p.source_chunk = chunk;
    mem.add(pts);
    ASSERT_LE(mem.size(), 1000u);
  }
  EXPECT_EQ(mem.points().front().source_chunk, 500 - 1000 / 37 - 1);
  PointCloudMemory off(0);
  off.add(std::vector<WorldPoint>(5));
  EXPECT_EQ(off.size(), 0u);
}

TEST(Session, StopWithOracleStubReproducesReference) {
  const DenoiserConfig c = small_config();
  const SceneSpec scene = build_scene(3, Difficulty::static_scene);
  const Intrinsics k = default_intrinsics(c.image_width, c.image_height);
  const Episode ref = generate_episode(scene, std::vector<Pose>(8, start_pose()), k, 4);
  WarpCopyModel stub(c);
  Session s(stub, ref);
  const ChunkResult r = s.step({CommandKind::stop, 0.0});
  ASSERT_EQ(r.frames.size(), 4u);
  std::size_t checked = 0;
  for (int f = 0; f < 4; ++f) {
    for (std::size_t p = 0; p < ref.frames[0].pixel_count(); ++p) {
      if (!r.masks[static_cast<std::size_t>(f)][p]) continue;
      ++checked;
      for (int ch = 0; ch < 3; ++ch) {
        ASSERT_EQ(r.frames[static_cast<std::size_t>(f)].data[p * 3 + ch], ref.frames[static_cast<std::size_t>(f)].data[p * 3 + ch]);
      }
    }
  }
  EXPECT_GT(checked, 1000u);
  EXPECT_GT(r.coverage, 0.4);
}

TEST(Session, LongRunKeepsCacheBounded) {
  const DenoiserConfig c = small_config(16);
  WarpCopyModel stub(c);
  Session s(stub, reference_walk(4, 16, 3));
  for (int i = 0; i < 100; ++i) {
    s.step({CommandKind::yaw_left, 1.0});
    ASSERT_EQ(s.cache().entry_counts(), std::vector<int>(2, c.history_window + 1));
  }
  EXPECT_EQ(s.chunk_index(), 100);
}

TEST(Session, SquareLoopClosesPoseFold) {
  const DenoiserConfig c = small_config(16);
  WarpCopyModel stub(c);
  Session s(stub, reference_walk(5, 16, 2));
  for (int side = 0; side < 4; ++side) {
    s.step({CommandKind::move_forward, 1.0});
    for (int t = 0; t < 3; ++t) s.step({CommandKind::yaw_right, 30.0});
  }
  EXPECT_LE((s.pose().matrix() - start_pose().matrix()).cwiseAbs().maxCoeff(), 1e-9);
  Pose fold = start_pose();
  for (const auto& cmd : s.consumed()) fold = accumulate(fold, command_to_delta(cmd));
  EXPECT_EQ(fold.matrix(), s.pose().matrix());
}

TEST(Session, DeterministicAndCausal) {
  const DenoiserConfig c = small_config(16);
  Denoiser model(c, 8);
  const Episode ref = reference_walk(6, 16, 3);
  const std::vector<InteractionCommand> a{{CommandKind::move_forward, 0.2}, {CommandKind::yaw_left, 4.0},
                                          {CommandKind::strafe_right, 0.2}};
  std::vector<InteractionCommand> b = a;
  b[2] = {CommandKind::pitch_up, 3.0};
  SessionOptions o;
  o.seed = 42;
  Session s1(model, ref, o), s2(model, ref, o), s3(model, ref, o);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const ChunkResult r1 = s1.step(a[i]);
    const ChunkResult r2 = s2.step(a[i]);
    const ChunkResult r3 = s3.step(b[i]);
    EXPECT_EQ(r1.frames, r2.frames);
    if (i < 2) {
      EXPECT_EQ(r1.frames, r3.frames) << "chunk " << i;
    } else {
      EXPECT_NE(r1.frames, r3.frames);
    }
  }
}

TEST(Session, RejectsMismatchedReference) {
  const DenoiserConfig c = small_config(16);
  WarpCopyModel stub(c);
  EXPECT_THROW(Session(stub, reference_walk(7, 32, 1)), std::invalid_argument);
  SessionOptions o;
  o.point_memory = true;
  EXPECT_THROW(Session(stub, reference_walk(7, 16, 1), o), std::invalid_argument);
}

TEST(Session, FreezeHoldsTime) {
  const DenoiserConfig c = small_config(16);
  WarpCopyModel stub(c);
  Session s(stub, reference_walk(8, 16, 1, Difficulty::dynamic_scene));
  EXPECT_EQ(s.step({}).frame_times, (std::vector<int>{0, 1, 2, 3}));
  s.set_freeze(true);
  EXPECT_EQ(s.step({}).frame_times, (std::vector<int>{4, 4, 4, 4}));
  s.set_freeze(false);
  EXPECT_EQ(s.step({}).frame_times, (std::vector<int>{4, 5, 6, 7}));
}

TEST(PointMemory, ReturningViewGainsCoverage) {
  const DenoiserConfig c = small_config(32);
  const SceneSpec scene = build_scene(9, Difficulty::static_scene);
  const Intrinsics k = default_intrinsics(32, 32);
  const Episode ref = generate_episode(scene, std::vector<Pose>(4, start_pose()), k, 4);
  std::vector<InteractionCommand> script;
  for (int i = 0; i < 6; ++i) script.push_back({CommandKind::yaw_right, 15.0});
  for (int i = 0; i < 3; ++i) script.push_back({CommandKind::move_forward, 0.3});
  for (int i = 0; i < 3; ++i) script.push_back({CommandKind::move_back, 0.3});
  for (int i = 0; i < 6; ++i) script.push_back({CommandKind::yaw_left, 15.0});
  WarpCopyModel stub(c);
  SessionOptions with;
  with.point_memory = true;
  with.point_budget = 20000;
  with.depth = oracle_depth(scene, k);
  Session a(stub, ref, with), b(stub, ref);
  double ca = 0, cb = 0;
  for (std::size_t i = 0; i < script.size(); ++i) {
    ca = a.step(script[i]).coverage;
    cb = b.step(script[i]).coverage;
  }
  EXPECT_GE(ca, cb);
  EXPECT_GT(a.memory().size(), 0u);
  EXPECT_LE(a.memory().size(), 20000u);
  EXPECT_EQ(b.memory().size(), 0u);
}

TEST(Evaluate, PerfectOutputHitsSentinelAndRunRoundTrips) {
  const DenoiserConfig c = small_config(16);
  WarpCopyModel stub(c);
  const Episode ref = reference_walk(10, 16, 2);
  const SceneSpec scene = build_scene(ref.scene_seed, ref.difficulty, ref.style);
  Session s(stub, ref);
  const auto script = random_script(3, 3, true);
  RunRecord run = roam(s, script);
  run.frames = oracle_frames(run, scene);
  const RunMetrics m = evaluate_run(run, scene);
  EXPECT_TRUE(m.psnr_capped);
  EXPECT_EQ(m.masked_psnr, kPsnrCap);
  EXPECT_GT(m.chunks_per_sec, 0.0);
  EXPECT_EQ(m.chunks, 3);
  EXPECT_LE(m.trajectory.rot_deg, 1e-9);
  EXPECT_LE(m.trajectory.trans, 1e-9);
  EXPECT_GT(m.coverage, 0.0);

  const auto dir = std::filesystem::temp_directory_path() / "star_engine_run";
  std::filesystem::remove_all(dir);
  save_run(run, dir);
  const RunRecord back = load_run(dir);
  EXPECT_EQ(back.frames, run.frames);
  EXPECT_EQ(back.masks, run.masks);
  EXPECT_EQ(back.commands.size(), run.commands.size());
  EXPECT_EQ(back.frame_times, run.frame_times);
  EXPECT_NEAR(evaluate_run(back, scene).coverage, m.coverage, 1e-12);
  std::filesystem::remove_all(dir);

  run.commands.pop_back();
  EXPECT_THROW(evaluate_run(run, scene), std::invalid_argument);
}

TEST(Evaluate, OracleWarpBeatsCopyLastFrameWhileTranslating) {
  const DenoiserConfig c = small_config(64);
  WarpCopyModel stub(c);
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    const Episode ref = reference_walk(seed, 64, 4);
    const SceneSpec scene = build_scene(ref.scene_seed, ref.difficulty, ref.style);
    Session s(stub, ref);
    const RunRecord run = roam(s, random_script(seed, 4, true));
    const auto truth = oracle_frames(run, scene);
    const double warp = masked_psnr(run.frames, truth, run.masks);
    const double copy = masked_psnr(copy_last_frame_baseline(run, scene), truth, run.masks);
    EXPECT_GT(warp, copy) << "seed " << seed;
  }
}

}  // namespace
}  // namespace star
