#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace actsparse {

/// Whole-file read; throws std::runtime_error naming the path on failure.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`.
void atomic_write_file(const std::filesystem::path& path, std::string_view contents);

std::uint32_t crc32_of(std::span<const std::byte> bytes);
std::uint32_t crc32_of(std::string_view text);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);
std::string format_float(float v);

/// Strict double parser (whole string must be consumed).
double parse_double(std::string_view text);

}  // namespace actsparse
