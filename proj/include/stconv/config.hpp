#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace stconv {

struct KeyValue {
  std::string key;
  std::string value;
  int line = 0;
};

/// Flat `key=value` lines. `#` starts a comment, blank lines are skipped, spaces
/// around key and value are trimmed. Duplicate keys and lines without `=` are errors.
std::vector<KeyValue> parse_key_values(const std::string& text);
std::vector<KeyValue> read_key_values(const std::filesystem::path& path);

// Value parsers for config keys; throw ConfigError naming the key.
[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what);
std::int64_t parse_int(const std::string& key, const std::string& v);
std::uint64_t parse_u64(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);
bool parse_bool(const std::string& key, const std::string& v);
/// Text that parses back to the same double.
std::string fmt_double(double v);

}  // namespace stconv
