#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "itupred/corpus.h"

namespace itupred {

// ---------------------------------------------------------------------------
// Windowing

struct WindowResult {
  Corpus corpus;
  /// Patients removed because no note fell inside the window.
  std::vector<std::string> dropped_patients;
  std::size_t dropped_notes = 0;
};

/// Keeps notes dated within [op - window_days, op - 1]. Gold annotations of
/// dropped notes are discarded with them. Throws ConfigError when
/// window_days < 1.
WindowResult window_notes(const Corpus& corpus, int window_days = 30);

// ---------------------------------------------------------------------------
// Features

class FeatureVocabulary {
 public:
  FeatureVocabulary() = default;
  /// Throws DataError on duplicate ids.
  explicit FeatureVocabulary(std::vector<std::string> concept_ids);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(std::size_t column) const { return ids_[column]; }
  std::optional<std::size_t> column(std::string_view concept_id) const;

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using CountVector = std::vector<std::uint32_t>;

struct PatientFeatures {
  std::string patient_id;
  AdmissionClass label = AdmissionClass::Ward;
  Demographics demographics;
  CountVector counts;

  bool itu() const { return is_itu(label); }
};

struct FeatureSet {
  FeatureVocabulary vocabulary;
  std::vector<PatientFeatures> patients;  // sorted by patient_id
};

/// Per-patient concept counts over all notes present in `corpus`, using the
/// (already filtered) `annotations`. The vocabulary holds every concept with
/// at least `min_count` mentions corpus-wide, sorted by concept id. Throws
/// DataError when the corpus has no patients.
FeatureSet build_features(const Corpus& corpus,
                          const AnnotationIndex& annotations,
                          std::size_t min_count = 2);

struct PatientSequence {
  std::string patient_id;
  AdmissionClass label = AdmissionClass::Ward;
  Demographics demographics;
  std::vector<std::string> note_ids;
  std::vector<CountVector> notes;  // ascending (timestamp, note_id)

  bool itu() const { return is_itu(label); }
};

/// One count vector per note, ordered by timestamp then note id. Patients
/// without notes are skipped.
std::vector<PatientSequence> build_sequences(const Corpus& corpus,
                                             const AnnotationIndex& annotations,
                                             const FeatureVocabulary& vocabulary);

// ---------------------------------------------------------------------------
// Splits

struct LabeledId {
  std::string patient_id;
  AdmissionClass label = AdmissionClass::Ward;
};

struct SplitConfig {
  std::uint64_t seed = 0;
  /// Planned-ITU patients moved to test. Defaults to half of them.
  std::optional<std::size_t> planned_test;
  /// Ward patients in test. Defaults to the ITU test count (1:1 balance).
  std::optional<std::size_t> ward_test;
};

struct SplitAssignment {
  std::set<std::string> train;
  std::set<std::string> test;
};

/// Every unplanned patient goes to test, `planned_test` randomly chosen
/// planned patients join them, and ward patients are sampled to balance the
/// test set. Everyone else trains. Throws DataError when the sizes are
/// infeasible or Ward/PlannedITU is empty.
SplitAssignment make_splits(std::vector<LabeledId> patients,
                            const SplitConfig& config);

template <typename Range>
std::vector<LabeledId> labeled_ids(const Range& patients) {
  std::vector<LabeledId> out;
  for (const auto& p : patients) out.push_back({p.patient_id, p.label});
  return out;
}

// ---------------------------------------------------------------------------
// Chi-squared

struct Chi2Result {
  double statistic = 0.0;
  double p = 1.0;
};

using Table2x2 = std::array<std::array<double, 2>, 2>;

/// Pearson chi-squared on a 2x2 table, df = 1, no continuity correction.
/// Throws DataError on negative cells or a zero row/column margin.
Chi2Result chi2_2x2(const Table2x2& table);

/// Upper tail of the chi-squared distribution with `df` degrees of freedom.
double chi2_survival(double x, int df = 1);

// ---------------------------------------------------------------------------
// Descriptive frequency analysis

struct ConceptRatioRow {
  std::string concept_id;
  std::uint64_t count_ward = 0;
  std::uint64_t count_itu = 0;
  double f_ward = 0.0;
  double f_itu = 0.0;
  /// f_ward / f_itu; nullopt (reported as NA) when the ITU count is zero.
  std::optional<double> ratio;
  double chi2 = 0.0;
  double p = 1.0;
};

struct RatioReport {
  std::vector<ConceptRatioRow> ward_enriched;
  std::vector<ConceptRatioRow> itu_enriched;
  std::uint64_t tokens_ward = 0;
  std::uint64_t tokens_itu = 0;
};

/// Normalized concept frequencies per group (count / group mention total),
/// tested per concept with chi2_2x2 on [count, other mentions] x [ward, ITU].
/// Significant rows (p < alpha) with ratio > 1 or NA are ranked descending
/// (NA first) into `ward_enriched`; rows with ratio < 1 ascending into
/// `itu_enriched`. Each list is cut to `top_n`. Throws DataError when either
/// group has no mentions.
RatioReport concept_ratio_report(const FeatureSet& features,
                                 std::size_t top_n = 50, double alpha = 0.05);

// ---------------------------------------------------------------------------
// Delimited exports

/// Header: patient_id, label, itu, age, sex, ethnicity, <concept ids...>.
void save_feature_table(const FeatureSet& features,
                        const std::filesystem::path& path,
                        std::string_view header = {});
FeatureSet load_feature_table(const std::filesystem::path& path);

void save_sequences(const std::vector<PatientSequence>& sequences,
                    const std::filesystem::path& path,
                    std::string_view header = {});
std::vector<PatientSequence> load_sequences(const std::filesystem::path& path);

void save_splits(const SplitAssignment& split,
                 const std::filesystem::path& path,
                 std::string_view header = {});
SplitAssignment load_splits(const std::filesystem::path& path);

/// Columns: concept, f_ward, f_itu, ratio (NA when undefined), chi2, p.
void save_ratio_table(const std::vector<ConceptRatioRow>& rows,
                      const std::filesystem::path& path,
                      std::string_view header = {});

}  // namespace itupred
