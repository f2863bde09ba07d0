#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace itupred {

enum class Negation { No, Yes };
enum class Experiencer { Patient, Other };
enum class Certainty { Confirmed, Suspected };

/// Contextual qualifiers attached to a concept mention.
struct MetaFlags {
  Negation negation = Negation::No;
  Experiencer experiencer = Experiencer::Patient;
  Certainty certainty = Certainty::Confirmed;

  /// True for mentions that survive the exclusion filter.
  bool relevant() const {
    return negation == Negation::No && experiencer == Experiencer::Patient &&
           certainty == Certainty::Confirmed;
  }
  bool operator==(const MetaFlags&) const = default;
};

/// A concept mention. `start`/`end` are byte offsets into the UTF-8 note text
/// with `text.substr(start, end - start) == surface`.
struct Annotation {
  std::string note_id;
  std::string concept_id;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string surface;
  MetaFlags meta;

  bool operator==(const Annotation&) const = default;
};

std::string_view to_string(Negation v);
std::string_view to_string(Experiencer v);
std::string_view to_string(Certainty v);
bool parse_negation(std::string_view s, Negation& out);
bool parse_experiencer(std::string_view s, Experiencer& out);
bool parse_certainty(std::string_view s, Certainty& out);

}  // namespace itupred
