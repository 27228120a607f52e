// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small file helpers. Binary rasters are contiguous little-endian f32.

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace star {

std::string read_text(const std::filesystem::path& file);
void write_text(const std::filesystem::path& file, const std::string& text);

std::vector<float> read_f32(const std::filesystem::path& file);
void write_f32(const std::filesystem::path& file, std::span<const float> data);

}  // namespace star
