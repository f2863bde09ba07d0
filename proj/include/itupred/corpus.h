#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "itupred/annotation.h"
#include "itupred/date.h"

namespace itupred {

enum class Sex { Male, Female };
enum class Ethnicity { White, NonWhite };

/// Post-operative destination. The binary target is `is_itu()`.
enum class AdmissionClass { Ward, PlannedITU, UnplannedITU };

inline bool is_itu(AdmissionClass c) { return c != AdmissionClass::Ward; }

constexpr int kMinAge = 16;
constexpr int kMaxAge = 95;

struct Demographics {
  int age = 0;
  Sex sex = Sex::Male;
  Ethnicity ethnicity = Ethnicity::White;
  bool operator==(const Demographics&) const = default;
};

struct Note {
  std::string note_id;
  std::string patient_id;
  Date timestamp;
  std::string text;
  bool operator==(const Note&) const = default;
};

struct Patient {
  std::string patient_id;
  Demographics demographics;
  Date operation_date;
  AdmissionClass label = AdmissionClass::Ward;
  std::vector<Note> notes;
  bool operator==(const Patient&) const = default;
};

/// Annotations keyed by note id. Used both for generator gold and for
/// annotator output.
using AnnotationIndex = std::map<std::string, std::vector<Annotation>>;

struct Corpus {
  std::vector<Patient> patients;
  /// Gold mentions (including distractors, with their true meta flags).
  /// Empty when the corpus carries no gold.
  AnnotationIndex gold;
  bool operator==(const Corpus&) const = default;
};

std::string_view to_string(Sex v);
std::string_view to_string(Ethnicity v);
std::string_view to_string(AdmissionClass v);
std::optional<Sex> parse_sex(std::string_view s);
std::optional<Ethnicity> parse_ethnicity(std::string_view s);
std::optional<AdmissionClass> parse_admission_class(std::string_view s);

/// Writes the corpus as one JSON object per line and, when gold is present,
/// a sibling gold file (`<stem>.gold.jsonl`). `header` lines are emitted as
/// leading `#` comments.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 std::string_view header = {});

/// Reads a corpus written by save_corpus. Lines starting with `#` and blank
/// lines are skipped. The sibling gold file is read when it exists.
/// Throws ParseError naming the line and field on malformed records.
Corpus load_corpus(const std::filesystem::path& path);

std::filesystem::path gold_path_for(const std::filesystem::path& corpus_path);

/// Annotation files: one `{"note_id":..., "annotations":[...]}` per line.
void save_annotations(const AnnotationIndex& index,
                      const std::filesystem::path& path,
                      std::string_view header = {});
AnnotationIndex load_annotations(const std::filesystem::path& path);

struct Violation {
  std::string patient_id;
  std::string message;
};

/// All invariant violations; empty iff the corpus is valid.
std::vector<Violation> validate_corpus(const Corpus& corpus);

}  // namespace itupred
