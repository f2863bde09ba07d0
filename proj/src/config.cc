#include "itupred/config.h"

#include <fmt/format.h>

#include <charconv>
#include <fstream>
#include <sstream>

#include "itupred/error.h"

namespace itupred {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

bool is_unset(const std::string& v) { return v.empty() || v == "auto" || v == "none"; }

}  // namespace

ConfigFile ConfigFile::parse(std::string_view text, const std::string& source) {
  ConfigFile cfg;
  cfg.source_ = source;
  std::string section;
  std::istringstream in{std::string(text)};
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(fmt::format("{}:{}: unterminated section header", source, lineno));
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!valid_name(section))
        throw ConfigError(fmt::format("{}:{}: invalid section name '{}'", source, lineno, section));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(fmt::format("{}:{}: expected 'key = value'", source, lineno));
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!valid_name(key))
      throw ConfigError(fmt::format("{}:{}: invalid key '{}'", source, lineno, key));
    if (section.empty())
      throw ConfigError(fmt::format("{}:{}: key '{}' outside a section", source, lineno, key));
    const std::string full = section + "." + key;
    if (!cfg.values_.emplace(full, value).second)
      throw ConfigError(fmt::format("{}:{}: duplicate key '{}'", source, lineno, full));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  ConfigFile cfg = parse(ss.str(), path.string());
  cfg.base_dir_ = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return cfg;
}

void ConfigFile::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError(fmt::format("override '{}' is not section.key=value", assignment));
  const std::string key = trim(assignment.substr(0, eq));
  const auto dot = key.find('.');
  if (dot == std::string::npos || !valid_name(key.substr(0, dot)) ||
      !valid_name(key.substr(dot + 1)))
    throw ConfigError(fmt::format("override key '{}' is not section.key", key));
  values_[key] = trim(assignment.substr(eq + 1));
}

std::string ConfigFile::get_string(const std::string& key, std::string fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("{}: '{}' is not a number", key, it->second));
}

std::uint64_t ConfigFile::get_uint(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::uint64_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError(fmt::format("{}: '{}' is not a non-negative integer", key, s));
  return v;
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, s));
}

std::optional<std::uint64_t> ConfigFile::get_optional_uint(
    const std::string& key, std::optional<std::uint64_t> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (is_unset(it->second)) return std::nullopt;
  return get_uint(key, 0);
}

std::optional<double> ConfigFile::get_optional_double(const std::string& key,
                                                      std::optional<double> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (is_unset(it->second)) return std::nullopt;
  return get_double(key, 0.0);
}

std::vector<std::string> ConfigFile::get_list(const std::string& key) const {
  std::vector<std::string> out;
  auto it = values_.find(key);
  if (it == values_.end()) return out;
  std::string_view s = it->second;
  while (!s.empty()) {
    const auto comma = s.find(',');
    std::string item = trim(s.substr(0, comma));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace itupred
