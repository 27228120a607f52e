// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// WebSocket session service. One connection is one engine session with its
// own cache, pose and noise cursor; the checkpoint is shared read-only.
//
// Wire protocol (JSON text frames, snake_case):
//   client -> server
//     {"type":"hello","episode_id":"0003"} or {"type":"hello","scene_seed":7}
//     {"type":"command","kind":"move_forward","magnitude":0.25}
//     {"type":"freeze","frozen":true}
//     {"type":"bye"}
//   server -> client
//     {"type":"ready","session_id":..,"width":..,"height":..,"k":..}
//     {"type":"chunk","index":i,"pose":{"q":[w,x,y,z],"t":[x,y,z]},"coverage":c,
//      "command":{..},"encoding":"f32"|"png","frames":[base64,..],"frames_dropped":false}
//     {"type":"metrics","fps":..,"latency_ms":..,"dropped":n,"coalesced":n}
//     {"type":"error","code":"not_found"|"bad_handshake"|"bad_message","text":..}
// Raw frames are float32 little-endian RGB rasters, row-major.
//
// Plain HTTP GET requests on the same port serve files from the UI
// directory when one is configured.

#pragma once

#include "star/engine.hpp"

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace star {

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);
/// 8-bit RGB PNG of an image with values in [0, 1].
std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> raw_f32(const Image& image);

/// Reference episodes addressable by id: either an episode directory
/// (meta.json) or a dataset pair directory (reference/meta.json) under root.
class EpisodeStore {
 public:
  explicit EpisodeStore(std::filesystem::path root = {}) : root_(std::move(root)) {}
  /// Unknown or malformed ids give nullopt.
  std::optional<Episode> find(const std::string& id) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

/// Reference walk generated for a scene seed at the model's size.
Episode reference_for_seed(std::uint64_t scene_seed, const DenoiserConfig& config);

nlohmann::json chunk_message(const ChunkResult& r, bool png, bool drop_frames);

/// Outbound buffer of one connection. Chunk messages beyond `max_chunks`
/// waiting to be written go out without frames so that indices stay
/// contiguous; every other message is kept.
class OutboundQueue {
 public:
  explicit OutboundQueue(std::size_t max_chunks = 2) : max_chunks_(max_chunks) {}

  /// Returns true when the frames of this chunk were dropped.
  bool push_chunk(const ChunkResult& r, bool png);
  void push(const nlohmann::json& message);
  bool empty() const { return items_.empty(); }
  std::size_t size() const { return items_.size(); }
  /// Front message, serialized.
  const std::string& front() const { return items_.front().text; }
  void pop();
  std::size_t dropped() const { return dropped_; }
  std::size_t waiting_chunks() const { return chunks_; }

 private:
  struct Item {
    std::string text;
    bool chunk = false;
  };
  std::size_t max_chunks_;
  std::deque<Item> items_;
  std::size_t chunks_ = 0;
  std::size_t dropped_ = 0;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  unsigned short port = 0;
  std::filesystem::path episodes;
  std::filesystem::path ui_dir;
  bool png_frames = false;
  std::size_t max_queued_chunks = 2;
  SessionOptions session;
};

class Server {
 public:
  Server(const DenoiserModel& model, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Bound port (useful with port 0).
  unsigned short port() const;
  /// Blocks until stop().
  void run();
  /// Thread safe. Closes every session and returns from run().
  void stop();
  std::size_t sessions_started() const;

  /// Opaque; defined in the implementation.
  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace star
