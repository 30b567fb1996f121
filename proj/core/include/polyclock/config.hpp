#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace polyclock {

// Section/key/value text configuration:
//
//   # comment
//   [section]
//   key = value
//
// Keys are validated against a fixed schema at parse time; lookups of
// typed values raise ConfigError naming the key and its line.
class ConfigFile {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  // `base_dir` resolves relative paths.
  static ConfigFile parse(std::string_view text, std::string base_dir = ".");
  static ConfigFile load(const std::string& path);

  bool has(std::string_view section, std::string_view key) const;
  const Entry* find(std::string_view section, std::string_view key) const;

  std::string get_string(std::string_view section, std::string_view key, std::string fallback = {}) const;
  double get_double(std::string_view section, std::string_view key, double fallback) const;
  long get_long(std::string_view section, std::string_view key, long fallback) const;
  bool get_bool(std::string_view section, std::string_view key, bool fallback) const;
  std::vector<double> get_doubles(std::string_view section, std::string_view key) const;
  // Relative paths are taken relative to the config file's directory.
  std::string get_path(std::string_view section, std::string_view key, std::string fallback = {}) const;

  std::string resolve(const std::string& path) const;
  const std::string& base_dir() const noexcept { return base_dir_; }
  // FNV-1a 64-bit hash of the raw text, as 16 hex digits.
  const std::string& hash() const noexcept { return hash_; }

  [[noreturn]] void fail(std::string_view section, std::string_view key, std::string_view message) const;

 private:
  std::map<std::string, Entry, std::less<>> entries_;  // "section.key"
  std::string base_dir_;
  std::string hash_;
};

std::string fnv1a_hex(std::string_view text);

}  // namespace polyclock
