// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural toy scenes (checkered ground, boxes, one moving sphere) and an
// exact ray-cast renderer that doubles as the depth oracle.

#pragma once

#include "star/geometry.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace star {

using Color = std::array<float, 3>;

enum class Difficulty { static_scene, dynamic_scene };
/// Ground and box texture style. Blurred scenes stand in for the synthetic
/// corpus, sharp ones for the real corpus.
enum class TextureStyle { sharp, blurred };

std::string_view to_string(Difficulty d);
std::string_view to_string(TextureStyle s);
Difficulty parse_difficulty(std::string_view s);
TextureStyle parse_texture_style(std::string_view s);

inline constexpr int kSceneTags = 4;

struct Box {
  Eigen::Vector3d center;
  Eigen::Vector3d size;
  Color color{};
};

struct Mover {
  Eigen::Vector3d center;
  /// World units per frame.
  Eigen::Vector3d velocity;
  double radius = 0.5;
  Color color{};
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int scene_tag = 0;
  Difficulty difficulty = Difficulty::static_scene;
  TextureStyle style = TextureStyle::sharp;
  /// Checker period in world units on the ground plane (y = 0).
  double checker_period = 1.0;
  Color ground_a{};
  Color ground_b{};
  Color sky{};
  std::vector<Box> boxes;
  Mover mover;

  bool operator==(const SceneSpec& o) const;
};

SceneSpec build_scene(std::uint64_t seed, Difficulty difficulty, TextureStyle style = TextureStyle::sharp);

/// Camera height above the ground for default trajectories.
inline constexpr double kEyeHeight = 1.5;
/// Start pose: at eye height, looking along +z.
Pose start_pose();

struct RenderOutput {
  Image frame;
  DepthMap depth;
};

/// Renders frame t. Depth is camera-space z of the first hit; sky pixels
/// are invalid and take the sky color.
RenderOutput render(const SceneSpec& scene, const Pose& pose, const Intrinsics& k, int t);

struct Episode {
  std::vector<Image> frames;
  std::vector<DepthMap> depths;
  std::vector<Pose> poses;
  Intrinsics intrinsics;
  int scene_tag = 0;
  int frame_count = 0;
  int chunk_frames = 4;
  std::uint64_t scene_seed = 0;
  Difficulty difficulty = Difficulty::static_scene;
  TextureStyle style = TextureStyle::sharp;

  int chunk_count() const { return chunk_frames > 0 ? frame_count / chunk_frames : 0; }
  bool consistent() const;
  bool operator==(const Episode&) const;
};

Episode generate_episode(const SceneSpec& scene, std::span<const Pose> trajectory, const Intrinsics& k,
                         int chunk_frames);

/// Default camera for the micro-world.
Intrinsics default_intrinsics(int width = 64, int height = 64);

/// Frame poses for a command script, one command per chunk.
std::vector<Pose> command_trajectory(const Pose& start, std::span<const InteractionCommand> commands, int chunk_frames,
                                     const StepConfig& step = {});

/// Random command script. Translating scripts always include a translation
/// in every chunk.
std::vector<InteractionCommand> random_script(std::uint64_t seed, int chunks, bool translating);

/// {q: [w, x, y, z], t: [x, y, z]}
nlohmann::json pose_to_json(const Pose& p);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json intrinsics_to_json(const Intrinsics& k);
Intrinsics intrinsics_from_json(const nlohmann::json& j);

void save_episode(const Episode& ep, const std::filesystem::path& dir);
Episode load_episode(const std::filesystem::path& dir);

void save_commands(std::span<const InteractionCommand> commands, const std::filesystem::path& file);
std::vector<InteractionCommand> load_commands(const std::filesystem::path& file);

/// A reference video and a target video of the same scene, with the command
/// script that produced the target trajectory.
struct EpisodePair {
  Episode reference;
  Episode target;
  std::vector<InteractionCommand> commands;
};

struct DatasetOptions {
  int count = 64;
  int chunks = 4;
  int chunk_frames = 4;
  int width = 64;
  int height = 64;
  Difficulty difficulty = Difficulty::static_scene;
  TextureStyle style = TextureStyle::sharp;
};

EpisodePair make_pair(std::uint64_t seed, const DatasetOptions& opts);
/// Writes NNNN/{reference,target}/ and NNNN/commands.json under dir.
void write_dataset(std::uint64_t seed, const DatasetOptions& opts, const std::filesystem::path& dir);
std::vector<EpisodePair> load_dataset(const std::filesystem::path& dir);

}  // namespace star
