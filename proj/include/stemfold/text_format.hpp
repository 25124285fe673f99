#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace stemfold {

// Ordered `key = value` text used for manifests, checkpoints and config files.
// Lines starting with '#' are comments. Keys are unique; set() overwrites.
class KeyValueFile {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }
  void set(const std::string& key, std::uint64_t value);
  void set(const std::string& key, bool value);

  bool contains(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;
  // Throws DataError when the key is missing or malformed.
  std::string require(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_string() const;
  static KeyValueFile parse(const std::string& text);
  static KeyValueFile load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::string format_double(double v);
std::vector<double> parse_double_list(const std::string& text);
std::string join_doubles(const std::vector<double>& values);

// 64-bit FNV-1a, used for dataset and parameter fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n);
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return h_; }
  std::string hex() const;

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace stemfold
