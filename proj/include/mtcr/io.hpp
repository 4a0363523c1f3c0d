#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mtcr::io {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view text);
std::int64_t parse_int(std::string_view text);

std::vector<std::string_view> split(std::string_view line, char sep);
std::string_view trim(std::string_view s);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file then renames over the target, so readers
/// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Seconds since the Unix epoch <-> "YYYY-MM-DDTHH:MM:SSZ". Parsing also
/// accepts a trailing "+HH:MM"/"-HH:MM" offset.
std::string format_iso8601(std::int64_t unix_seconds);
std::int64_t parse_iso8601(std::string_view text);

/// Day of week for a Unix timestamp shifted by utc_offset (0 = Monday).
int weekday(std::int64_t unix_seconds, std::int64_t utc_offset);

}  // namespace mtcr::io
