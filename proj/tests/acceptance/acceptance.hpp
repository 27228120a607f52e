// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion. Each check computes its
// expected values with an oracle written here, independent of the library
// code path it judges.

#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace star::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  /// Scratch directory for datasets, checkpoints and runs.
  std::filesystem::path work;
  /// The star command-line tool.
  std::filesystem::path cli;
  /// Where training criteria log NDJSON metrics.
  std::filesystem::path metrics;
  /// Divides training iterations by this factor. Only for checking the
  /// plumbing; results under a divisor above 1 mean nothing.
  long iteration_divisor = 1;

  long iterations(long n) const { return std::max(1L, n / iteration_divisor); }
};

struct Criterion {
  std::string name;
  /// Wall-clock limit in seconds; exceeding it fails the criterion.
  double budget_s = 0.0;
  std::function<Outcome(const Context&)> run;
};

std::vector<Criterion> fast_criteria();
std::vector<Criterion> training_criteria();

/// printf-style formatting into a std::string.
std::string format(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

}  // namespace star::acceptance
