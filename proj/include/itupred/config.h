#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace itupred {

/// Plain-text configuration:
///
///   # comment
///   [section]
///   key = value
///
/// Keys are addressed as "section.key". Values are trimmed; an empty value
/// means "unset" for optional settings. Unknown keys are rejected by the
/// typed accessors' owner (see PipelineConfig).
class ConfigFile {
 public:
  /// Throws ConfigError on syntax errors or duplicate keys.
  static ConfigFile parse(std::string_view text, const std::string& source = "<string>");
  /// Throws ConfigError when the file cannot be read.
  static ConfigFile load(const std::filesystem::path& path);

  /// Applies "section.key=value". Throws ConfigError on malformed input.
  void set(std::string_view assignment);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  std::string get_string(const std::string& key, std::string fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Empty or "auto"/"none" values yield nullopt.
  std::optional<std::uint64_t> get_optional_uint(const std::string& key,
                                                 std::optional<std::uint64_t> fallback) const;
  std::optional<double> get_optional_double(const std::string& key,
                                            std::optional<double> fallback) const;
  /// Comma-separated list.
  std::vector<std::string> get_list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
  std::filesystem::path base_dir_ = ".";
  std::string source_ = "<string>";
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view data);

}  // namespace itupred
