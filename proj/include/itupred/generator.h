#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "itupred/annotator.h"
#include "itupred/corpus.h"

namespace itupred {

/// Expected mentions per note for one concept, by admission group. Planned
/// and unplanned ITU patients share `itu_rate`.
struct ConceptProfile {
  std::string concept_id;
  double ward_rate = 0.0;
  double itu_rate = 0.0;
};

struct GeneratorConfig {
  std::uint64_t seed = 7;
  std::size_t ward = 1832;
  std::size_t planned = 349;
  std::size_t unplanned = 87;

  std::vector<ConceptProfile> profiles;

  int notes_min = 3;
  int notes_max = 10;
  /// In-window notes fall in [op - window_days, op - 1].
  int window_days = 30;
  /// Probability that an individual note lands outside the window.
  double straggler_fraction = 0.08;
  /// Probability that a patient has no in-window notes at all.
  double no_window_fraction = 0.015;

  // Distractor mentions per note, wrapped in context triggers.
  double negated_rate = 0.3;
  double family_rate = 0.2;
  double suspected_rate = 0.2;
  /// Fraction of distractors phrased with triggers the shipped rules do not
  /// cover ("was ruled out", "Sister diagnosed with", ...).
  double out_of_rule_fraction = 0.0;
  /// Concept-free filler sentences per note.
  double filler_rate = 2.0;

  double male_fraction = 0.49;
  double white_fraction = 0.60;
  int age_median = 56;
  double age_sd = 16.0;

  Date first_operation{2019, 4, 1};
  Date last_operation{2021, 9, 30};
};

/// Throws ConfigError on negative sizes/rates, empty Ward or PlannedITU
/// cohorts, fractions outside [0,1] or an inverted notes range.
void validate_generator_config(const GeneratorConfig& config);

/// Deterministic synthetic corpus with gold annotations. Surface forms come
/// from `lexicon`; every profile concept must exist there.
Corpus generate_corpus(const GeneratorConfig& config,
                       const ConceptLexicon& lexicon);

/// Reads `concept_id<TAB>ward_rate<TAB>itu_rate` rows.
std::vector<ConceptProfile> load_profiles(const std::filesystem::path& path);

}  // namespace itupred
