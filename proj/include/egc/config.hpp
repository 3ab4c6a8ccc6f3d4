#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace egc {

/// Flat `key = value` configuration with override support. Every lookup
/// records the effective value (default or explicit), so resolved_text()
/// reproduces the full configuration of a run; keys that were set but never
/// consumed are reported as errors by require_all_consumed().
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_file(const std::string& path);
  /// Parse a `key=value` token (command-line override).
  void set_from_token(const std::string& token);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);

  /// Throws if any provided key was never consumed by a get_* call.
  void require_all_consumed() const;

  /// Sorted `key = value` lines of every consumed/effective entry.
  std::string resolved_text() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace egc
