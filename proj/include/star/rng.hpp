// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-addressed random streams. A stream is named by (seed, chunk, step,
// tag) so any draw can be reproduced without carrying generator state.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string_view>

namespace star {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::int64_t chunk, std::int64_t step, std::string_view tag) {
  std::uint64_t k = mix64(seed);
  k = mix64(k ^ static_cast<std::uint64_t>(chunk));
  k = mix64(k ^ static_cast<std::uint64_t>(step) * 0x2545f4914f6cdd1dULL);
  return mix64(k ^ hash_name(tag));
}

class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t key) : gen_(key) {}
  NoiseStream(std::uint64_t seed, std::int64_t chunk, std::int64_t step, std::string_view tag)
      : gen_(stream_key(seed, chunk, step, tag)) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_); }

  template <typename M>
  void fill_normal(M& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace star
