#include "itupred/corpus.h"

#include <fmt/format.h>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "itupred/error.h"
#include "itupred/io.h"
#include "json.hpp"

namespace itupred {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enum spellings

std::string_view to_string(Negation v) { return v == Negation::Yes ? "Yes" : "No"; }
std::string_view to_string(Experiencer v) {
  return v == Experiencer::Other ? "Other" : "Patient";
}
std::string_view to_string(Certainty v) {
  return v == Certainty::Suspected ? "Suspected" : "Confirmed";
}

bool parse_negation(std::string_view s, Negation& out) {
  if (s == "Yes") out = Negation::Yes;
  else if (s == "No") out = Negation::No;
  else return false;
  return true;
}
bool parse_experiencer(std::string_view s, Experiencer& out) {
  if (s == "Patient") out = Experiencer::Patient;
  else if (s == "Other") out = Experiencer::Other;
  else return false;
  return true;
}
bool parse_certainty(std::string_view s, Certainty& out) {
  if (s == "Confirmed") out = Certainty::Confirmed;
  else if (s == "Suspected") out = Certainty::Suspected;
  else return false;
  return true;
}

std::string_view to_string(Sex v) { return v == Sex::Male ? "Male" : "Female"; }
std::string_view to_string(Ethnicity v) {
  return v == Ethnicity::White ? "White" : "NonWhite";
}
std::string_view to_string(AdmissionClass v) {
  switch (v) {
    case AdmissionClass::Ward: return "Ward";
    case AdmissionClass::PlannedITU: return "PlannedITU";
    case AdmissionClass::UnplannedITU: return "UnplannedITU";
  }
  return "?";
}

std::optional<Sex> parse_sex(std::string_view s) {
  if (s == "Male") return Sex::Male;
  if (s == "Female") return Sex::Female;
  return std::nullopt;
}
std::optional<Ethnicity> parse_ethnicity(std::string_view s) {
  if (s == "White") return Ethnicity::White;
  if (s == "NonWhite") return Ethnicity::NonWhite;
  return std::nullopt;
}
std::optional<AdmissionClass> parse_admission_class(std::string_view s) {
  if (s == "Ward") return AdmissionClass::Ward;
  if (s == "PlannedITU") return AdmissionClass::PlannedITU;
  if (s == "UnplannedITU") return AdmissionClass::UnplannedITU;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dates

std::optional<Date> Date::parse(std::string_view iso) {
  if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') return std::nullopt;
  auto num = [&](std::size_t pos, std::size_t len, int& out) {
    auto* first = iso.data() + pos;
    auto [p, ec] = std::from_chars(first, first + len, out);
    return ec == std::errc{} && p == first + len;
  };
  int y = 0, m = 0, d = 0;
  if (!num(0, 4, y) || !num(5, 2, m) || !num(8, 2, d)) return std::nullopt;
  std::chrono::year_month_day ymd{std::chrono::year{y},
                                  std::chrono::month{static_cast<unsigned>(m)},
                                  std::chrono::day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  return Date(std::chrono::sys_days{ymd});
}

std::string Date::iso() const {
  std::chrono::year_month_day ymd{days_};
  return fmt::format("{:04d}-{:02d}-{:02d}", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()),
                     static_cast<unsigned>(ymd.day()));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

class LineReader {
 public:
  LineReader(std::string source, std::size_t line)
      : source_(std::move(source)), line_(line) {}

  [[noreturn]] void fail(const std::string& field,
                         const std::string& detail) const {
    throw ParseError(source_, line_, field, detail);
  }

  const json& require(const json& obj, const std::string& key,
                      const std::string& path) const {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) fail(path + key, "missing");
    return *it;
  }

  std::string string_field(const json& obj, const std::string& key,
                           const std::string& path = {}) const {
    const json& v = require(obj, key, path);
    if (!v.is_string()) fail(path + key, "expected a string");
    return v.get<std::string>();
  }

  long long int_field(const json& obj, const std::string& key,
                      const std::string& path = {}) const {
    const json& v = require(obj, key, path);
    if (!v.is_number_integer()) fail(path + key, "expected an integer");
    return v.get<long long>();
  }

  Date date_field(const json& obj, const std::string& key,
                  const std::string& path = {}) const {
    auto s = string_field(obj, key, path);
    auto d = Date::parse(s);
    if (!d) fail(path + key, "not an ISO-8601 date: '" + s + "'");
    return *d;
  }

 private:
  std::string source_;
  std::size_t line_;
};

json annotation_to_json(const Annotation& a) {
  return json{{"start", a.start},
              {"end", a.end},
              {"concept_id", a.concept_id},
              {"surface", a.surface},
              {"negation", to_string(a.meta.negation)},
              {"experiencer", to_string(a.meta.experiencer)},
              {"certainty", to_string(a.meta.certainty)}};
}

Annotation annotation_from_json(const LineReader& r, const json& j,
                                const std::string& note_id,
                                const std::string& path) {
  Annotation a;
  a.note_id = note_id;
  auto start = r.int_field(j, "start", path);
  auto end = r.int_field(j, "end", path);
  if (start < 0 || end <= start) r.fail(path + "end", "invalid span");
  a.start = static_cast<std::size_t>(start);
  a.end = static_cast<std::size_t>(end);
  a.concept_id = r.string_field(j, "concept_id", path);
  if (j.contains("surface")) a.surface = r.string_field(j, "surface", path);
  if (j.contains("negation") &&
      !parse_negation(r.string_field(j, "negation", path), a.meta.negation))
    r.fail(path + "negation", "expected Yes|No");
  if (j.contains("experiencer") &&
      !parse_experiencer(r.string_field(j, "experiencer", path),
                         a.meta.experiencer))
    r.fail(path + "experiencer", "expected Patient|Other");
  if (j.contains("certainty") &&
      !parse_certainty(r.string_field(j, "certainty", path), a.meta.certainty))
    r.fail(path + "certainty", "expected Confirmed|Suspected");
  return a;
}

template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    LineReader r(path.string(), lineno);
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) r.fail("<record>", "malformed JSON");
    fn(r, j);
  }
}

}  // namespace

std::filesystem::path gold_path_for(const std::filesystem::path& corpus_path) {
  auto p = corpus_path;
  p.replace_extension(".gold.jsonl");
  return p;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  for (const auto& p : corpus.patients) {
    json notes = json::array();
    for (const auto& n : p.notes)
      notes.push_back(json{{"note_id", n.note_id},
                           {"timestamp", n.timestamp.iso()},
                           {"text", n.text}});
    json rec{{"patient_id", p.patient_id},
             {"demographics",
              {{"age", p.demographics.age},
               {"sex", to_string(p.demographics.sex)},
               {"ethnicity", to_string(p.demographics.ethnicity)}}},
             {"operation_date", p.operation_date.iso()},
             {"label", to_string(p.label)},
             {"notes", std::move(notes)}};
    out << rec.dump() << '\n';
  }
  if (!corpus.gold.empty())
    save_annotations(corpus.gold, gold_path_for(path), header);
}

Corpus load_corpus(const std::filesystem::path& path) {
  Corpus corpus;
  for_each_record(path, [&](const LineReader& r, const json& j) {
    Patient p;
    p.patient_id = r.string_field(j, "patient_id");
    const json& demo = r.require(j, "demographics", "");
    p.demographics.age =
        static_cast<int>(r.int_field(demo, "age", "demographics."));
    auto sex = parse_sex(r.string_field(demo, "sex", "demographics."));
    if (!sex) r.fail("demographics.sex", "expected Male|Female");
    p.demographics.sex = *sex;
    auto eth =
        parse_ethnicity(r.string_field(demo, "ethnicity", "demographics."));
    if (!eth) r.fail("demographics.ethnicity", "expected White|NonWhite");
    p.demographics.ethnicity = *eth;
    p.operation_date = r.date_field(j, "operation_date");
    auto label = parse_admission_class(r.string_field(j, "label"));
    if (!label) r.fail("label", "expected Ward|PlannedITU|UnplannedITU");
    p.label = *label;
    const json& notes = r.require(j, "notes", "");
    if (!notes.is_array()) r.fail("notes", "expected an array");
    for (std::size_t i = 0; i < notes.size(); ++i) {
      auto prefix = fmt::format("notes[{}].", i);
      Note n;
      n.note_id = r.string_field(notes[i], "note_id", prefix);
      n.patient_id = p.patient_id;
      n.timestamp = r.date_field(notes[i], "timestamp", prefix);
      n.text = r.string_field(notes[i], "text", prefix);
      p.notes.push_back(std::move(n));
    }
    corpus.patients.push_back(std::move(p));
  });
  auto gold = gold_path_for(path);
  if (std::filesystem::exists(gold)) corpus.gold = load_annotations(gold);
  return corpus;
}

void save_annotations(const AnnotationIndex& index,
                      const std::filesystem::path& path,
                      std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  for (const auto& [note_id, anns] : index) {
    json arr = json::array();
    for (const auto& a : anns) arr.push_back(annotation_to_json(a));
    out << json{{"note_id", note_id}, {"annotations", std::move(arr)}}.dump()
        << '\n';
  }
}

AnnotationIndex load_annotations(const std::filesystem::path& path) {
  AnnotationIndex index;
  for_each_record(path, [&](const LineReader& r, const json& j) {
    auto note_id = r.string_field(j, "note_id");
    const json& arr = r.require(j, "annotations", "");
    if (!arr.is_array()) r.fail("annotations", "expected an array");
    auto& dst = index[note_id];
    for (std::size_t i = 0; i < arr.size(); ++i)
      dst.push_back(annotation_from_json(r, arr[i], note_id,
                                         fmt::format("annotations[{}].", i)));
  });
  return index;
}

// ---------------------------------------------------------------------------
// Validation

std::vector<Violation> validate_corpus(const Corpus& corpus) {
  std::vector<Violation> out;
  std::set<std::string> patient_ids;
  std::set<std::string> note_ids;
  const Date unset{};
  for (const auto& p : corpus.patients) {
    if (p.patient_id.empty()) out.push_back({p.patient_id, "empty patient_id"});
    if (!patient_ids.insert(p.patient_id).second)
      out.push_back({p.patient_id, "duplicate patient_id " + p.patient_id});
    if (p.demographics.age < kMinAge || p.demographics.age > kMaxAge)
      out.push_back({p.patient_id,
                     fmt::format("age {} outside [{}, {}]", p.demographics.age,
                                 kMinAge, kMaxAge)});
    if (p.operation_date == unset)
      out.push_back({p.patient_id, "missing operation_date"});
    for (const auto& n : p.notes) {
      if (n.timestamp == unset)
        out.push_back({p.patient_id, "note " + n.note_id + " missing timestamp"});
      if (n.patient_id != p.patient_id)
        out.push_back({p.patient_id, "note " + n.note_id +
                                         " belongs to patient " + n.patient_id});
      if (!note_ids.insert(n.note_id).second)
        out.push_back({p.patient_id, "duplicate note_id " + n.note_id});
    }
  }
  return out;
}

}  // namespace itupred
