#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace wsiscreen {

/// Round-trip-exact double formatting for CSV output.
inline std::string fmt_double(double x, int precision = 17) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, x);
  return buf;
}

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::uint64_t file_checksum(const std::filesystem::path& path);

/// Splits one CSV line on commas. Producers in this project never emit
/// quoted fields, so no quote handling is done.
std::vector<std::string> split_csv_line(const std::string& line);

/// Splits text into lines, tolerating a trailing newline and CRLF.
std::vector<std::string> split_lines(const std::string& text);

}  // namespace wsiscreen
