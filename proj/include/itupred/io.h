#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace itupred::io {

/// Opens `path` for writing, creating parent directories. Throws Error.
std::ofstream open_output(const std::filesystem::path& path);

/// Writes each line of `header` prefixed with "# ".
void write_header(std::ostream& out, std::string_view header);

/// Calls `fn(lineno, line)` for each non-blank line that does not start with
/// '#'. Throws MissingArtifactError when the file cannot be opened.
void for_each_line(const std::filesystem::path& path,
                   const std::function<void(std::size_t, const std::string&)>& fn);

std::vector<std::string> split(std::string_view s, char sep);

/// Shortest round-trip representation, or "NA".
std::string num(double v);

double parse_double(std::string_view s, const std::string& source,
                    std::size_t line, const std::string& field);
long long parse_int(std::string_view s, const std::string& source,
                    std::size_t line, const std::string& field);

}  // namespace itupred::io
