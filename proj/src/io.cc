#include "itupred/io.h"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <sstream>

#include "itupred/error.h"

namespace itupred::io {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void write_header(std::ostream& out, std::string_view header) {
  if (header.empty()) return;
  std::istringstream lines{std::string(header)};
  for (std::string line; std::getline(lines, line);) out << "# " << line << '\n';
}

void for_each_line(
    const std::filesystem::path& path,
    const std::function<void(std::size_t, const std::string&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    fn(lineno, line);
  }
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "NA";
  return fmt::format("{}", v);
}

double parse_double(std::string_view s, const std::string& source,
                    std::size_t line, const std::string& field) {
  if (s == "NA") return std::nan("");
  try {
    std::size_t used = 0;
    double v = std::stod(std::string(s), &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(source, line, field, "not a number: '" + std::string(s) + "'");
}

long long parse_int(std::string_view s, const std::string& source,
                    std::size_t line, const std::string& field) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError(source, line, field,
                     "not an integer: '" + std::string(s) + "'");
  return v;
}

}  // namespace itupred::io
