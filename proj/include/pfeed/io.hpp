#pragma once

// File helpers: atomic writes, tab-separated parsing and little-endian binary blocks.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pfeed::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a partial file.
void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body,
                  bool binary = false);

std::vector<std::string_view> split(std::string_view line, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Calls `fn(fields, line_number)` for every non-empty, non-comment line.
void for_each_record(const std::filesystem::path& path,
                     const std::function<void(const std::vector<std::string_view>&, std::size_t)>& fn);

std::int64_t parse_int(std::string_view s);
double parse_double(std::string_view s);

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, std::string_view s);
void write_f32_block(std::ostream& os, std::span<const float> values);

std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
void read_f32_block(std::istream& is, std::span<float> out);
/// Reads four bytes and throws InputError unless they equal `magic`.
void expect_magic(std::istream& is, std::string_view magic, const std::filesystem::path& path);

}  // namespace pfeed::io
