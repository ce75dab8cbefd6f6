#include "somnolog/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "somnolog/error.hpp"

namespace somnolog {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Io: return "io";
    case ErrorCode::Parse: return "parse";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::UnknownStage: return "unknown_stage";
  }
  return "unknown";
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split(std::string_view text, char delimiter) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find(delimiter, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(text.substr(start));
      return parts;
    }
    parts.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string s = trim(text);
  if (s.empty()) throw Error(ErrorCode::Parse, std::string(what) + ": empty numeric value");
  char* end = nullptr;
  errno = 0;
  const double value = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) {
    throw Error(ErrorCode::Parse, std::string(what) + ": not a number: '" + s + "'");
  }
  return value;
}

long long parse_int(std::string_view text, std::string_view what) {
  const std::string s = trim(text);
  long long value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::Parse, std::string(what) + ": not an integer: '" + s + "'");
  }
  return value;
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view origin) {
  KeyValueConfig config;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::Parse, std::string(origin) + ":" + std::to_string(line_no) +
                                        ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) {
      throw Error(ErrorCode::Parse, std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    }
    config.set(std::move(key), std::move(value));
  }
  return config;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

void KeyValueConfig::set(std::string key, std::string value) {
  entries_.insert_or_assign(std::move(key), std::move(value));
}

bool KeyValueConfig::contains(std::string_view key) const {
  return entries_.find(key) != entries_.end();
}

std::optional<std::string> KeyValueConfig::get(std::string_view key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(std::string_view key, std::string fallback) const {
  auto value = get(key);
  return value ? *value : std::move(fallback);
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  auto value = get(key);
  if (!value) return fallback;
  const double parsed = parse_double(*value, key);
  if (!std::isfinite(parsed)) throw Error(ErrorCode::Parse, std::string(key) + ": value must be finite");
  return parsed;
}

long long KeyValueConfig::get_int(std::string_view key, long long fallback) const {
  auto value = get(key);
  return value ? parse_int(*value, key) : fallback;
}

std::uint64_t KeyValueConfig::get_u64(std::string_view key, std::uint64_t fallback) const {
  auto value = get(key);
  if (!value) return fallback;
  const std::string s = trim(*value);
  std::uint64_t parsed = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), parsed);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::Parse, std::string(key) + ": not an unsigned integer: '" + s + "'");
  }
  return parsed;
}

bool KeyValueConfig::get_bool(std::string_view key, bool fallback) const {
  auto value = get(key);
  if (!value) return fallback;
  if (*value == "true" || *value == "1" || *value == "yes") return true;
  if (*value == "false" || *value == "0" || *value == "no") return false;
  throw Error(ErrorCode::Parse, std::string(key) + ": not a boolean: '" + *value + "'");
}

KeyValueConfig KeyValueConfig::with_prefix(std::string_view prefix) const {
  KeyValueConfig out;
  for (const auto& [key, value] : entries_) {
    if (key.starts_with(prefix)) out.set(key, value);
  }
  return out;
}

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [key, value] : other.entries_) set(key, value);
}

std::string KeyValueConfig::canonical_text() const {
  std::string text;
  for (const auto& [key, value] : entries_) {
    text += key;
    text += " = ";
    text += value;
    text += '\n';
  }
  return text;
}

std::string format_number(double value) {
  char buffer[64];
  const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  if (ec != std::errc()) return "nan";
  return std::string(buffer, ptr);
}

}  // namespace somnolog
