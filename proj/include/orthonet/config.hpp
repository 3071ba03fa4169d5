#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace orthonet {

// Flat `key = value` configuration. Lines starting with '#' (after optional
// whitespace) and blank lines are ignored; a '#' after a value starts a
// comment as well. Only registered keys are accepted.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "config");
  static Config load(const std::string& path);

  // Every accepted key with its default ("" when it has none).
  static const std::map<std::string, std::string>& known_keys();

  // Throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.contains(key); }

  // Explicit value, else the registered default; throws ConfigError if the
  // key has neither.
  std::string get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  // Comma-separated lists; empty entries are dropped.
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  // Copy with every registered default filled in.
  Config resolved() const;
  // Sorted `key = value` lines; parse(to_text()) reproduces the config.
  std::string to_text() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> values_;
};

// Shortest round-trip decimal form of a double.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& what);

}  // namespace orthonet
