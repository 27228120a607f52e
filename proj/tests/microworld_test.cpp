// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/microworld.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

namespace star {
namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("star_mw_" + name);
  std::filesystem::remove_all(p);
  return p;
}

double masked_mae(const WarpResult& w, const Image& truth) {
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < truth.height; ++y) {
    for (int x = 0; x < truth.width; ++x) {
      if (!w.mask[static_cast<std::size_t>(y) * truth.width + x]) continue;
      for (int c = 0; c < 3; ++c) sum += std::abs(w.frame.at(x, y, c) - truth.at(x, y, c));
      n += 3;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

TEST(BuildScene, Deterministic) {
  EXPECT_EQ(build_scene(7, Difficulty::static_scene), build_scene(7, Difficulty::static_scene));
  EXPECT_EQ(build_scene(7, Difficulty::static_scene).mover.velocity, Eigen::Vector3d::Zero());
  EXPECT_NE(build_scene(7, Difficulty::dynamic_scene).mover.velocity, Eigen::Vector3d::Zero());
}

TEST(BuildScene, SeedsDiffer) {
  const SceneSpec a = build_scene(7, Difficulty::dynamic_scene);
  const SceneSpec b = build_scene(8, Difficulty::dynamic_scene);
  bool differ = a.boxes.size() != b.boxes.size();
  for (std::size_t i = 0; !differ && i < a.boxes.size(); ++i) differ = a.boxes[i].center != b.boxes[i].center;
  EXPECT_TRUE(differ);
  for (const SceneSpec& s : {a, b}) {
    for (const Box& box : s.boxes) EXPECT_GT(box.size.minCoeff(), 0.0);
    EXPECT_GT(s.mover.radius, 0.0);
  }
}

TEST(Render, LookingDownDepthWithinFrustumBound) {
  const SceneSpec scene = build_scene(3, Difficulty::static_scene);
  const Intrinsics k = default_intrinsics(32, 32);
  const double h = 2.0;
  Pose pose = pitch(-90.0);
  pose.translation = {100.0, -h, 100.0};
  const RenderOutput r = render(scene, pose, k, 0);
  const double half_diag = std::hypot(std::max(k.cx, k.width - 1 - k.cx) / k.fx, std::max(k.cy, k.height - 1 - k.cy) / k.fy);
  const double cos_max = 1.0 / std::sqrt(1.0 + half_diag * half_diag);
  for (std::size_t i = 0; i < r.depth.values.size(); ++i) {
    ASSERT_TRUE(r.depth.valid[i]);
    EXPECT_GE(r.depth.values[i], h - 1e-5);
    EXPECT_LE(r.depth.values[i], h / cos_max + 1e-5);
  }
}

TEST(Render, StaticSceneIgnoresTime) {
  const SceneSpec scene = build_scene(4, Difficulty::static_scene);
  const Intrinsics k = default_intrinsics(32, 32);
  EXPECT_EQ(render(scene, start_pose(), k, 0).frame, render(scene, start_pose(), k, 1).frame);
}

TEST(Render, SkyOnlyView) {
  const SceneSpec scene = build_scene(5, Difficulty::static_scene);
  const Intrinsics k = default_intrinsics(32, 32);
  Pose pose = pitch(60.0);
  pose.translation = {0.0, -kEyeHeight, 500.0};
  const RenderOutput r = render(scene, pose, k, 0);
  for (std::size_t i = 0; i < r.depth.valid.size(); ++i) {
    EXPECT_FALSE(r.depth.valid[i]);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(r.frame.data[i * 3 + c], scene.sky[static_cast<std::size_t>(c)]);
  }
}

TEST(Render, DepthPositive) {
  const SceneSpec scene = build_scene(6, Difficulty::dynamic_scene);
  const RenderOutput r = render(scene, start_pose(), default_intrinsics(), 3);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < r.depth.values.size(); ++i) {
    if (!r.depth.valid[i]) continue;
    ++valid;
    EXPECT_GT(r.depth.values[i], 0.0f);
  }
  EXPECT_GT(valid, 0u);
}

TEST(GenerateEpisode, FixedCameraStaticScene) {
  const SceneSpec scene = build_scene(9, Difficulty::static_scene);
  const std::vector<Pose> traj(4, start_pose());
  const Episode ep = generate_episode(scene, traj, default_intrinsics(32, 32), 4);
  EXPECT_EQ(ep.frame_count, 4);
  EXPECT_EQ(ep.chunk_count(), 1);
  for (const Image& f : ep.frames) EXPECT_EQ(f, ep.frames[0]);
  EXPECT_THROW(generate_episode(scene, std::vector<Pose>(3), default_intrinsics(32, 32), 4), std::invalid_argument);
}

TEST(GenerateEpisode, Deterministic) {
  const auto script = random_script(3, 3, false);
  const auto traj = command_trajectory(start_pose(), script, 4);
  const Episode a = generate_episode(build_scene(11, Difficulty::dynamic_scene), traj, default_intrinsics(32, 32), 4);
  const Episode b = generate_episode(build_scene(11, Difficulty::dynamic_scene), traj, default_intrinsics(32, 32), 4);
  EXPECT_EQ(a, b);
}

TEST(GenerateEpisode, WarpAgreesWithRenderer) {
  const Intrinsics k = default_intrinsics();
  int checked = 0;
  for (std::uint64_t seed = 20; seed < 28; ++seed) {
    for (const TextureStyle style : {TextureStyle::sharp, TextureStyle::blurred}) {
      const SceneSpec scene = build_scene(seed, Difficulty::static_scene, style);
      const auto traj = command_trajectory(start_pose(), random_script(seed, 4, false), 4);
      const Episode ep = generate_episode(scene, traj, k, 4);
      for (std::size_t j = 1; j < traj.size(); ++j) {
        const Pose rel = compose(inverse(ep.poses[j]), ep.poses[0]);
        const WarpResult w = reproject(ep.frames[0], ep.depths[0], k, rel);
        if (w.coverage() < 0.1) continue;
        ++checked;
        EXPECT_LT(masked_mae(w, ep.frames[j]), 0.02) << "seed " << seed << " frame " << j;
      }
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(CommandTrajectory, LastFrameIsCommandFold) {
  const std::vector<InteractionCommand> script{{CommandKind::move_forward, 0.4}, {CommandKind::yaw_left, 20.0}};
  const auto traj = command_trajectory(start_pose(), script, 4);
  ASSERT_EQ(traj.size(), 8u);
  const Pose fold = accumulate(accumulate(start_pose(), command_to_delta(script[0])), command_to_delta(script[1]));
  EXPECT_LE((traj.back().matrix() - fold.matrix()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(traj[1].translation.z(), 0.2, 1e-12);
}

TEST(EpisodeIo, RoundTrip) {
  const auto dir = temp_dir("roundtrip");
  const auto traj = command_trajectory(start_pose(), random_script(1, 2, false), 4);
  const Episode ep = generate_episode(build_scene(12, Difficulty::static_scene), traj, default_intrinsics(32, 32), 4);
  save_episode(ep, dir);
  const Episode back = load_episode(dir);
  EXPECT_EQ(back.frames, ep.frames);
  EXPECT_EQ(back.depths, ep.depths);
  EXPECT_EQ(back.scene_tag, ep.scene_tag);
  EXPECT_EQ(back.scene_seed, 12u);
  for (std::size_t i = 0; i < ep.poses.size(); ++i) {
    EXPECT_LE((back.poses[i].matrix() - ep.poses[i].matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, WriteAndLoad) {
  const auto dir = temp_dir("dataset");
  DatasetOptions opts;
  opts.count = 2;
  opts.chunks = 2;
  opts.width = opts.height = 16;
  write_dataset(100, opts, dir);
  const auto pairs = load_dataset(dir);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1].target.scene_seed, 101u);
  EXPECT_EQ(pairs[0].commands.size(), 2u);
  EXPECT_EQ(pairs[0].reference.frame_count, 8);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace star
