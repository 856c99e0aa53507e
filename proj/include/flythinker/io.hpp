// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace flythinker {

// Reads and writes whole files; failures raise IoError naming the path.
// Parent directories are created on write.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

// Shortest round-trippable decimal form of a double.
std::string format_double(double v);

std::vector<std::string> split(std::string_view s, char sep);

}  // namespace flythinker
