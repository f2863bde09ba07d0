#include "itupred/generator.h"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "itupred/error.h"
#include "itupred/rng.h"

namespace itupred {

namespace {

enum class Kind { Planted, Negated, Family, Suspected };

// `{c}` is replaced by the surface form, `{C}` by the surface form with its
// first letter capitalized. Templates carry no lexicon terms and no trigger
// words other than the intended one.
constexpr std::array kPlanted = {
    "Known {c}.",          "Seen in clinic with {c}.",
    "Imaging consistent with {c}.", "History of {c} noted.",
    "{C} documented in referral.",  "Reviewed {c} today.",
    "Ongoing management of {c}.",
};
constexpr std::array kNegated = {"No evidence of {c}.", "Patient denies {c}.",
                                 "Negative for {c}.",
                                 "{C}-negative on screening."};
constexpr std::array kFamily = {"Family history of {c}.", "Mother had {c}.",
                                "Father treated for {c}."};
constexpr std::array kSuspected = {"Suspected {c}.", "Possible {c}.",
                                   "Query {c}.", "?{C} on imaging."};
constexpr std::array kNegatedOutOfRule = {"{C} was ruled out.",
                                          "{C} excluded on review."};
constexpr std::array kFamilyOutOfRule = {"Sister diagnosed with {c}.",
                                         "Brother has {c}."};
constexpr std::array kSuspectedOutOfRule = {"Cannot exclude {c}.",
                                            "{C} remains likely."};
constexpr std::array kFiller = {
    "Plan discussed with team.", "Observations stable overnight.",
    "Seen on ward round.",       "Will review after scan.",
    "Consent form signed.",      "Bloods taken this morning.",
};

struct Sentence {
  Kind kind = Kind::Planted;
  bool out_of_rule = false;
  std::int64_t concept_index = -1;  // -1 for filler
  std::size_t variant = 0;
};

template <typename Arr>
std::size_t pick(Rng& rng, const Arr& arr) {
  return std::uniform_int_distribution<std::size_t>(0, arr.size() - 1)(rng);
}

std::size_t poisson(Rng& rng, double mean) {
  if (mean <= 0.0) return 0;
  return std::poisson_distribution<std::size_t>(mean)(rng);
}

bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::bernoulli_distribution(p)(rng);
}

long uniform_int(Rng& rng, long lo, long hi) {
  return std::uniform_int_distribution<long>(lo, hi)(rng);
}

const char* template_for(const Sentence& s) {
  switch (s.kind) {
    case Kind::Planted: return kPlanted[s.variant];
    case Kind::Negated:
      return s.out_of_rule ? kNegatedOutOfRule[s.variant] : kNegated[s.variant];
    case Kind::Family:
      return s.out_of_rule ? kFamilyOutOfRule[s.variant] : kFamily[s.variant];
    case Kind::Suspected:
      return s.out_of_rule ? kSuspectedOutOfRule[s.variant]
                           : kSuspected[s.variant];
  }
  return "";
}

Sentence make_sentence(Rng& rng, Kind kind, bool out_of_rule,
                       std::int64_t concept_index) {
  Sentence s{kind, out_of_rule, concept_index, 0};
  switch (kind) {
    case Kind::Planted: s.variant = pick(rng, kPlanted); break;
    case Kind::Negated:
      s.variant = out_of_rule ? pick(rng, kNegatedOutOfRule) : pick(rng, kNegated);
      break;
    case Kind::Family:
      s.variant = out_of_rule ? pick(rng, kFamilyOutOfRule) : pick(rng, kFamily);
      break;
    case Kind::Suspected:
      s.variant =
          out_of_rule ? pick(rng, kSuspectedOutOfRule) : pick(rng, kSuspected);
      break;
  }
  return s;
}

MetaFlags true_flags(Kind kind) {
  MetaFlags f;
  if (kind == Kind::Negated) f.negation = Negation::Yes;
  if (kind == Kind::Family) f.experiencer = Experiencer::Other;
  if (kind == Kind::Suspected) f.certainty = Certainty::Suspected;
  return f;
}

// Appends the rendered template to `text`; returns the surface's byte span.
std::pair<std::size_t, std::size_t> render(std::string& text,
                                           std::string_view tmpl,
                                           const std::string& surface) {
  std::size_t start = 0, end = 0;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
      start = text.size();
      text += surface;
      if (tmpl[i + 1] == 'C' && !text.empty())
        text[start] = static_cast<char>(
            std::toupper(static_cast<unsigned char>(text[start])));
      end = text.size();
      i += 2;
    } else {
      text.push_back(tmpl[i]);
    }
  }
  return {start, end};
}

}  // namespace

void validate_generator_config(const GeneratorConfig& c) {
  if (c.ward == 0 || c.planned == 0)
    throw ConfigError("generator: Ward and PlannedITU cohort sizes must be > 0");
  if (c.notes_min < 0 || c.notes_max < c.notes_min)
    throw ConfigError(fmt::format("generator: invalid notes range [{}, {}]",
                                  c.notes_min, c.notes_max));
  if (c.window_days < 1) throw ConfigError("generator: window_days must be >= 1");
  for (double r : {c.negated_rate, c.family_rate, c.suspected_rate, c.filler_rate})
    if (!(r >= 0.0)) throw ConfigError("generator: rates must be >= 0");
  for (double f : {c.straggler_fraction, c.no_window_fraction,
                   c.out_of_rule_fraction, c.male_fraction, c.white_fraction})
    if (!(f >= 0.0 && f <= 1.0))
      throw ConfigError("generator: fractions must lie in [0, 1]");
  for (const auto& p : c.profiles)
    if (!(p.ward_rate >= 0.0) || !(p.itu_rate >= 0.0))
      throw ConfigError("generator: negative rate for concept " + p.concept_id);
  if (c.last_operation < c.first_operation)
    throw ConfigError("generator: operation date range is inverted");
  if (c.age_sd < 0.0) throw ConfigError("generator: age_sd must be >= 0");
}

Corpus generate_corpus(const GeneratorConfig& config,
                       const ConceptLexicon& lexicon) {
  validate_generator_config(config);
  std::vector<std::vector<std::string>> surfaces;
  for (const auto& p : config.profiles) {
    const auto* entry = lexicon.find(p.concept_id);
    if (!entry)
      throw ConfigError("generator: profile concept not in lexicon: " +
                        p.concept_id);
    std::vector<std::string> forms{entry->canonical_name};
    forms.insert(forms.end(), entry->synonyms.begin(), entry->synonyms.end());
    surfaces.push_back(std::move(forms));
  }

  Rng rng(config.seed);
  std::vector<AdmissionClass> labels;
  labels.insert(labels.end(), config.ward, AdmissionClass::Ward);
  labels.insert(labels.end(), config.planned, AdmissionClass::PlannedITU);
  labels.insert(labels.end(), config.unplanned, AdmissionClass::UnplannedITU);
  std::shuffle(labels.begin(), labels.end(), rng);

  const long op_span = config.last_operation - config.first_operation;
  const double distractor_rate =
      config.negated_rate + config.family_rate + config.suspected_rate;
  std::normal_distribution<double> age_dist(config.age_median, config.age_sd);

  Corpus corpus;
  corpus.patients.reserve(labels.size());
  for (std::size_t pi = 0; pi < labels.size(); ++pi) {
    Patient p;
    p.patient_id = fmt::format("P{:06d}", pi + 1);
    p.label = labels[pi];
    double age = std::round(age_dist(rng));
    p.demographics.age =
        static_cast<int>(std::clamp(age, double(kMinAge), double(kMaxAge)));
    p.demographics.sex = bernoulli(rng, config.male_fraction) ? Sex::Male : Sex::Female;
    p.demographics.ethnicity = bernoulli(rng, config.white_fraction)
                                   ? Ethnicity::White
                                   : Ethnicity::NonWhite;
    p.operation_date = config.first_operation + uniform_int(rng, 0, op_span);
    const bool no_window = bernoulli(rng, config.no_window_fraction);
    const bool itu = is_itu(p.label);

    const long n_notes = uniform_int(rng, config.notes_min, config.notes_max);
    for (long ni = 0; ni < n_notes; ++ni) {
      Note note;
      note.note_id = fmt::format("{}-N{:03d}", p.patient_id, ni + 1);
      note.patient_id = p.patient_id;
      if (no_window || bernoulli(rng, config.straggler_fraction)) {
        note.timestamp = bernoulli(rng, 0.5)
                             ? p.operation_date - config.window_days -
                                   uniform_int(rng, 1, 60)
                             : p.operation_date + uniform_int(rng, 0, 14);
      } else {
        note.timestamp = p.operation_date - uniform_int(rng, 1, config.window_days);
      }

      std::vector<Sentence> sentences;
      for (std::size_t ci = 0; ci < config.profiles.size(); ++ci) {
        const auto& prof = config.profiles[ci];
        auto n = poisson(rng, itu ? prof.itu_rate : prof.ward_rate);
        for (std::size_t k = 0; k < n; ++k)
          sentences.push_back(make_sentence(rng, Kind::Planted, false,
                                            static_cast<std::int64_t>(ci)));
      }
      if (!config.profiles.empty() && distractor_rate > 0.0) {
        for (auto [kind, rate] : {std::pair{Kind::Negated, config.negated_rate},
                                  std::pair{Kind::Family, config.family_rate},
                                  std::pair{Kind::Suspected, config.suspected_rate}}) {
          auto n = poisson(rng, rate);
          for (std::size_t k = 0; k < n; ++k) {
            auto ci = uniform_int(rng, 0, static_cast<long>(config.profiles.size()) - 1);
            bool oor = bernoulli(rng, config.out_of_rule_fraction);
            sentences.push_back(make_sentence(rng, kind, oor, ci));
          }
        }
      }
      for (std::size_t k = poisson(rng, config.filler_rate); k > 0; --k) {
        Sentence s;
        s.variant = pick(rng, kFiller);
        sentences.push_back(s);
      }
      std::shuffle(sentences.begin(), sentences.end(), rng);

      std::vector<Annotation> gold;
      for (const auto& s : sentences) {
        if (!note.text.empty()) note.text.push_back(' ');
        if (s.concept_index < 0) {
          note.text += kFiller[s.variant];
          continue;
        }
        const auto& forms = surfaces[static_cast<std::size_t>(s.concept_index)];
        const auto& surface = forms[pick(rng, forms)];
        auto [start, end] = render(note.text, template_for(s), surface);
        Annotation a;
        a.note_id = note.note_id;
        a.concept_id = config.profiles[static_cast<std::size_t>(s.concept_index)].concept_id;
        a.start = start;
        a.end = end;
        a.surface = note.text.substr(start, end - start);
        a.meta = true_flags(s.kind);
        gold.push_back(std::move(a));
      }
      corpus.gold[note.note_id] = std::move(gold);
      p.notes.push_back(std::move(note));
    }
    corpus.patients.push_back(std::move(p));
  }
  return corpus;
}

std::vector<ConceptProfile> load_profiles(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open profiles " + path.string());
  std::vector<ConceptProfile> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::vector<std::string> cols;
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    if (lineno == 1 && !cols.empty() && cols[0] == "concept_id") continue;
    if (cols.size() != 3)
      throw ParseError(path.string(), lineno, "row", "expected 3 columns");
    ConceptProfile p;
    p.concept_id = cols[0];
    try {
      p.ward_rate = std::stod(cols[1]);
    } catch (const std::exception&) {
      throw ParseError(path.string(), lineno, "ward_rate", "not a number");
    }
    try {
      p.itu_rate = std::stod(cols[2]);
    } catch (const std::exception&) {
      throw ParseError(path.string(), lineno, "itu_rate", "not a number");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace itupred
