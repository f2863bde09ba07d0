#include "itupred/cohort.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "itupred/error.h"
#include "itupred/io.h"
#include "itupred/rng.h"
#include "json.hpp"

namespace itupred {

// ---------------------------------------------------------------------------
// Windowing

WindowResult window_notes(const Corpus& corpus, int window_days) {
  if (window_days < 1)
    throw ConfigError(fmt::format("window_days must be >= 1 (got {})", window_days));
  WindowResult result;
  for (const auto& p : corpus.patients) {
    Patient kept = p;
    kept.notes.clear();
    const Date first = p.operation_date - window_days;
    const Date last = p.operation_date - 1;
    for (const auto& n : p.notes) {
      if (n.timestamp >= first && n.timestamp <= last) {
        kept.notes.push_back(n);
        auto g = corpus.gold.find(n.note_id);
        if (g != corpus.gold.end()) result.corpus.gold.insert(*g);
      } else {
        ++result.dropped_notes;
      }
    }
    if (kept.notes.empty()) {
      result.dropped_patients.push_back(p.patient_id);
    } else {
      result.corpus.patients.push_back(std::move(kept));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Features

FeatureVocabulary::FeatureVocabulary(std::vector<std::string> concept_ids)
    : ids_(std::move(concept_ids)) {
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (!index_.emplace(ids_[i], i).second)
      throw DataError("duplicate concept in vocabulary: " + ids_[i]);
}

std::optional<std::size_t> FeatureVocabulary::column(
    std::string_view concept_id) const {
  auto it = index_.find(concept_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

namespace {

const std::vector<Annotation>& annotations_of(const AnnotationIndex& index,
                                              const std::string& note_id) {
  static const std::vector<Annotation> kEmpty;
  auto it = index.find(note_id);
  return it == index.end() ? kEmpty : it->second;
}

std::vector<const Patient*> sorted_patients(const Corpus& corpus) {
  std::vector<const Patient*> out;
  for (const auto& p : corpus.patients) out.push_back(&p);
  std::sort(out.begin(), out.end(), [](const Patient* a, const Patient* b) {
    return a->patient_id < b->patient_id;
  });
  return out;
}

}  // namespace

FeatureSet build_features(const Corpus& corpus,
                          const AnnotationIndex& annotations,
                          std::size_t min_count) {
  if (corpus.patients.empty())
    throw DataError("build_features: corpus has no patients");
  std::map<std::string, std::size_t> totals;
  for (const auto& p : corpus.patients)
    for (const auto& n : p.notes)
      for (const auto& a : annotations_of(annotations, n.note_id))
        ++totals[a.concept_id];

  std::vector<std::string> ids;
  for (const auto& [cid, count] : totals)
    if (count >= min_count) ids.push_back(cid);

  FeatureSet fs;
  fs.vocabulary = FeatureVocabulary(std::move(ids));
  for (const Patient* p : sorted_patients(corpus)) {
    PatientFeatures pf;
    pf.patient_id = p->patient_id;
    pf.label = p->label;
    pf.demographics = p->demographics;
    pf.counts.assign(fs.vocabulary.size(), 0);
    for (const auto& n : p->notes)
      for (const auto& a : annotations_of(annotations, n.note_id))
        if (auto col = fs.vocabulary.column(a.concept_id)) ++pf.counts[*col];
    fs.patients.push_back(std::move(pf));
  }
  return fs;
}

std::vector<PatientSequence> build_sequences(const Corpus& corpus,
                                             const AnnotationIndex& annotations,
                                             const FeatureVocabulary& vocabulary) {
  std::vector<PatientSequence> out;
  for (const Patient* p : sorted_patients(corpus)) {
    if (p->notes.empty()) continue;
    std::vector<const Note*> notes;
    for (const auto& n : p->notes) notes.push_back(&n);
    std::sort(notes.begin(), notes.end(), [](const Note* a, const Note* b) {
      if (a->timestamp != b->timestamp) return a->timestamp < b->timestamp;
      return a->note_id < b->note_id;
    });
    PatientSequence seq;
    seq.patient_id = p->patient_id;
    seq.label = p->label;
    seq.demographics = p->demographics;
    for (const Note* n : notes) {
      CountVector counts(vocabulary.size(), 0);
      for (const auto& a : annotations_of(annotations, n->note_id))
        if (auto col = vocabulary.column(a.concept_id)) ++counts[*col];
      seq.note_ids.push_back(n->note_id);
      seq.notes.push_back(std::move(counts));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

SplitAssignment make_splits(std::vector<LabeledId> patients,
                            const SplitConfig& config) {
  std::sort(patients.begin(), patients.end(),
            [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
  std::vector<std::string> ward, planned, unplanned;
  for (const auto& p : patients) {
    switch (p.label) {
      case AdmissionClass::Ward: ward.push_back(p.patient_id); break;
      case AdmissionClass::PlannedITU: planned.push_back(p.patient_id); break;
      case AdmissionClass::UnplannedITU: unplanned.push_back(p.patient_id); break;
    }
  }
  if (ward.empty() || planned.empty())
    throw DataError("make_splits: need at least one Ward and one PlannedITU patient");

  const std::size_t planned_test = config.planned_test.value_or(planned.size() / 2);
  if (planned_test > planned.size())
    throw DataError(fmt::format("make_splits: planned_test={} exceeds {} planned patients",
                                planned_test, planned.size()));
  const std::size_t ward_test =
      config.ward_test.value_or(planned_test + unplanned.size());
  if (ward_test > ward.size())
    throw DataError(fmt::format(
        "make_splits: {} ward patients cannot balance a test set needing {}",
        ward.size(), ward_test));

  Rng planned_rng = make_rng(config.seed, 0);
  Rng ward_rng = make_rng(config.seed, 1);
  std::shuffle(planned.begin(), planned.end(), planned_rng);
  std::shuffle(ward.begin(), ward.end(), ward_rng);

  SplitAssignment split;
  for (std::size_t i = 0; i < planned.size(); ++i)
    (i < planned_test ? split.test : split.train).insert(planned[i]);
  for (std::size_t i = 0; i < ward.size(); ++i)
    (i < ward_test ? split.test : split.train).insert(ward[i]);
  split.test.insert(unplanned.begin(), unplanned.end());
  return split;
}

// ---------------------------------------------------------------------------
// Chi-squared

double chi2_survival(double x, int df) {
  if (df < 1) throw DataError("chi2_survival: df must be >= 1");
  if (!(x > 0.0)) return 1.0;
  if (df == 1) return std::erfc(std::sqrt(x / 2.0));
  if (df == 2) return std::exp(-x / 2.0);
  // Regularized upper incomplete gamma Q(df/2, x/2) by series / continued
  // fraction (Numerical Recipes gser/gcf).
  const double a = df / 2.0, z = x / 2.0;
  const double gln = std::lgamma(a);
  if (z < a + 1.0) {
    double sum = 1.0 / a, term = sum, ap = a;
    for (int n = 0; n < 1000; ++n) {
      ap += 1.0;
      term *= z / ap;
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
    }
    return 1.0 - sum * std::exp(-z + a * std::log(z) - gln);
  }
  double b = z + 1.0 - a, c = 1.0 / 1e-300, d = 1.0 / b, h = d;
  for (int i = 1; i < 1000; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-z + a * std::log(z) - gln) * h;
}

Chi2Result chi2_2x2(const Table2x2& t) {
  for (const auto& row : t)
    for (double v : row)
      if (!(v >= 0.0)) throw DataError("chi2_2x2: cells must be non-negative");
  const double r0 = t[0][0] + t[0][1], r1 = t[1][0] + t[1][1];
  const double c0 = t[0][0] + t[1][0], c1 = t[0][1] + t[1][1];
  if (r0 == 0.0 || r1 == 0.0 || c0 == 0.0 || c1 == 0.0)
    throw DataError("chi2_2x2: zero margin");
  const double n = r0 + r1;
  const double rows[2] = {r0, r1}, cols[2] = {c0, c1};
  Chi2Result res;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double e = rows[i] * cols[j] / n;
      res.statistic += (t[i][j] - e) * (t[i][j] - e) / e;
    }
  res.p = chi2_survival(res.statistic, 1);
  return res;
}

// ---------------------------------------------------------------------------
// Ratio report

RatioReport concept_ratio_report(const FeatureSet& features, std::size_t top_n,
                                 double alpha) {
  const std::size_t d = features.vocabulary.size();
  std::vector<std::uint64_t> ward(d, 0), itu(d, 0);
  RatioReport report;
  for (const auto& p : features.patients) {
    auto& dst = p.itu() ? itu : ward;
    for (std::size_t j = 0; j < d; ++j) dst[j] += p.counts[j];
  }
  report.tokens_ward = std::accumulate(ward.begin(), ward.end(), std::uint64_t{0});
  report.tokens_itu = std::accumulate(itu.begin(), itu.end(), std::uint64_t{0});
  if (report.tokens_ward == 0 || report.tokens_itu == 0)
    throw DataError("concept_ratio_report: a group has no concept mentions");

  std::vector<ConceptRatioRow> ward_rows, itu_rows;
  for (std::size_t j = 0; j < d; ++j) {
    if (ward[j] + itu[j] == 0) continue;
    ConceptRatioRow row;
    row.concept_id = features.vocabulary.id(j);
    row.count_ward = ward[j];
    row.count_itu = itu[j];
    row.f_ward = static_cast<double>(ward[j]) / static_cast<double>(report.tokens_ward);
    row.f_itu = static_cast<double>(itu[j]) / static_cast<double>(report.tokens_itu);
    if (itu[j] > 0) row.ratio = row.f_ward / row.f_itu;
    Table2x2 table{{{double(ward[j]), double(report.tokens_ward - ward[j])},
                    {double(itu[j]), double(report.tokens_itu - itu[j])}}};
    if (report.tokens_ward == ward[j] && report.tokens_itu == itu[j]) continue;
    auto chi = chi2_2x2(table);
    row.chi2 = chi.statistic;
    row.p = chi.p;
    if (!(row.p < alpha)) continue;
    if (!row.ratio || *row.ratio > 1.0) ward_rows.push_back(row);
    else if (*row.ratio < 1.0) itu_rows.push_back(row);
  }
  std::stable_sort(ward_rows.begin(), ward_rows.end(), [](const auto& a, const auto& b) {
    if (a.ratio.has_value() != b.ratio.has_value()) return !a.ratio.has_value();
    if (!a.ratio) return a.f_ward > b.f_ward;
    return *a.ratio > *b.ratio;
  });
  std::stable_sort(itu_rows.begin(), itu_rows.end(),
                   [](const auto& a, const auto& b) { return *a.ratio < *b.ratio; });
  if (ward_rows.size() > top_n) ward_rows.resize(top_n);
  if (itu_rows.size() > top_n) itu_rows.resize(top_n);
  report.ward_enriched = std::move(ward_rows);
  report.itu_enriched = std::move(itu_rows);
  return report;
}

// ---------------------------------------------------------------------------
// Delimited exports

void save_feature_table(const FeatureSet& fs, const std::filesystem::path& path,
                        std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "patient_id\tlabel\titu\tage\tsex\tethnicity";
  for (const auto& id : fs.vocabulary.ids()) out << '\t' << id;
  out << '\n';
  for (const auto& p : fs.patients) {
    out << p.patient_id << '\t' << to_string(p.label) << '\t' << (p.itu() ? 1 : 0)
        << '\t' << p.demographics.age << '\t' << to_string(p.demographics.sex)
        << '\t' << to_string(p.demographics.ethnicity);
    for (auto c : p.counts) out << '\t' << c;
    out << '\n';
  }
}

FeatureSet load_feature_table(const std::filesystem::path& path) {
  const std::string src = path.string();
  FeatureSet fs;
  bool have_header = false;
  io::for_each_line(path, [&](std::size_t lineno, const std::string& line) {
    auto cols = io::split(line, '\t');
    if (!have_header) {
      if (cols.size() < 6 || cols[0] != "patient_id")
        throw ParseError(src, lineno, "header", "expected feature table header");
      fs.vocabulary = FeatureVocabulary({cols.begin() + 6, cols.end()});
      have_header = true;
      return;
    }
    if (cols.size() != 6 + fs.vocabulary.size())
      throw ParseError(src, lineno, "row", "column count does not match header");
    PatientFeatures p;
    p.patient_id = cols[0];
    auto label = parse_admission_class(cols[1]);
    if (!label) throw ParseError(src, lineno, "label", "unknown label " + cols[1]);
    p.label = *label;
    p.demographics.age = static_cast<int>(io::parse_int(cols[3], src, lineno, "age"));
    auto sex = parse_sex(cols[4]);
    auto eth = parse_ethnicity(cols[5]);
    if (!sex) throw ParseError(src, lineno, "sex", "unknown value " + cols[4]);
    if (!eth) throw ParseError(src, lineno, "ethnicity", "unknown value " + cols[5]);
    p.demographics.sex = *sex;
    p.demographics.ethnicity = *eth;
    for (std::size_t j = 6; j < cols.size(); ++j) {
      auto v = io::parse_int(cols[j], src, lineno, fs.vocabulary.id(j - 6));
      if (v < 0) throw ParseError(src, lineno, fs.vocabulary.id(j - 6), "negative count");
      p.counts.push_back(static_cast<std::uint32_t>(v));
    }
    fs.patients.push_back(std::move(p));
  });
  if (!have_header) throw ParseError(src, 0, "header", "empty feature table");
  return fs;
}

void save_sequences(const std::vector<PatientSequence>& sequences,
                    const std::filesystem::path& path, std::string_view header) {
  using nlohmann::json;
  auto out = io::open_output(path);
  io::write_header(out, header);
  for (const auto& s : sequences) {
    json notes = json::array();
    for (std::size_t i = 0; i < s.notes.size(); ++i) {
      json sparse = json::array();
      for (std::size_t j = 0; j < s.notes[i].size(); ++j)
        if (s.notes[i][j]) sparse.push_back({j, s.notes[i][j]});
      notes.push_back({{"note_id", s.note_ids[i]},
                       {"dim", s.notes[i].size()},
                       {"counts", std::move(sparse)}});
    }
    out << json{{"patient_id", s.patient_id},
                {"label", to_string(s.label)},
                {"age", s.demographics.age},
                {"sex", to_string(s.demographics.sex)},
                {"ethnicity", to_string(s.demographics.ethnicity)},
                {"notes", std::move(notes)}}
               .dump()
        << '\n';
  }
}

std::vector<PatientSequence> load_sequences(const std::filesystem::path& path) {
  using nlohmann::json;
  const std::string src = path.string();
  std::vector<PatientSequence> out;
  io::for_each_line(path, [&](std::size_t lineno, const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ParseError(src, lineno, "<record>", "malformed JSON");
    try {
      PatientSequence s;
      s.patient_id = j.at("patient_id").get<std::string>();
      auto label = parse_admission_class(j.at("label").get<std::string>());
      if (!label) throw ParseError(src, lineno, "label", "unknown label");
      s.label = *label;
      s.demographics.age = j.at("age").get<int>();
      auto sex = parse_sex(j.at("sex").get<std::string>());
      auto eth = parse_ethnicity(j.at("ethnicity").get<std::string>());
      if (!sex || !eth) throw ParseError(src, lineno, "demographics", "unknown value");
      s.demographics.sex = *sex;
      s.demographics.ethnicity = *eth;
      for (const auto& n : j.at("notes")) {
        s.note_ids.push_back(n.at("note_id").get<std::string>());
        CountVector counts(n.at("dim").get<std::size_t>(), 0);
        for (const auto& kv : n.at("counts")) {
          auto idx = kv.at(0).get<std::size_t>();
          if (idx >= counts.size())
            throw ParseError(src, lineno, "counts", "index out of range");
          counts[idx] = kv.at(1).get<std::uint32_t>();
        }
        s.notes.push_back(std::move(counts));
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ParseError(src, lineno, "<record>", e.what());
    }
  });
  return out;
}

void save_splits(const SplitAssignment& split, const std::filesystem::path& path,
                 std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "patient_id\tsplit\n";
  std::map<std::string, const char*> rows;
  for (const auto& id : split.train) rows[id] = "train";
  for (const auto& id : split.test) rows[id] = "test";
  for (const auto& [id, which] : rows) out << id << '\t' << which << '\n';
}

SplitAssignment load_splits(const std::filesystem::path& path) {
  SplitAssignment split;
  const std::string src = path.string();
  io::for_each_line(path, [&](std::size_t lineno, const std::string& line) {
    auto cols = io::split(line, '\t');
    if (cols.size() != 2) throw ParseError(src, lineno, "row", "expected 2 columns");
    if (cols[0] == "patient_id") return;
    if (cols[1] == "train") split.train.insert(cols[0]);
    else if (cols[1] == "test") split.test.insert(cols[0]);
    else throw ParseError(src, lineno, "split", "expected train|test");
  });
  return split;
}

void save_ratio_table(const std::vector<ConceptRatioRow>& rows,
                      const std::filesystem::path& path, std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "concept\tf_ward\tf_itu\tratio\tchi2\tp\n";
  for (const auto& r : rows)
    out << r.concept_id << '\t' << fmt::format("{:.5f}", r.f_ward) << '\t'
        << fmt::format("{:.5f}", r.f_itu) << '\t'
        << (r.ratio ? fmt::format("{:.2f}", *r.ratio) : std::string("NA")) << '\t'
        << fmt::format("{:.4f}", r.chi2) << '\t' << fmt::format("{:.3g}", r.p)
        << '\n';
}

}  // namespace itupred
