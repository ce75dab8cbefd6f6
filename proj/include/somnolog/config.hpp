#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace somnolog {

// Flat key-value configuration with dotted keys:
//
//   # comment
//   train.loss = soft-ce
//   sadeh.intercept = 7.601
//
// Later assignments override earlier ones. Keys are kept sorted so that the
// canonical text form (and its hash) does not depend on insertion order.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  bool contains(std::string_view key) const;
  std::optional<std::string> get(std::string_view key) const;

  std::string get_string(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key, double fallback) const;
  long long get_int(std::string_view key, long long fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  // Entries whose key starts with `prefix` (e.g. "sadeh.").
  KeyValueConfig with_prefix(std::string_view prefix) const;
  void merge(const KeyValueConfig& other);

  const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }
  std::string canonical_text() const;

 private:
  std::map<std::string, std::string, std::less<>> entries_;
};

double parse_double(std::string_view text, std::string_view what);
long long parse_int(std::string_view text, std::string_view what);
std::vector<std::string> split(std::string_view text, char delimiter);
std::string trim(std::string_view text);

// Shortest decimal text that parses back to exactly `value`.
std::string format_number(double value);

}  // namespace somnolog
