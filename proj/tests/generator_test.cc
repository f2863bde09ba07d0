#include <doctest.h>

#include <cmath>
#include <map>

#include "itupred/annotator.h"
#include "itupred/cohort.h"
#include "itupred/error.h"
#include "itupred/generator.h"
#include "support.h"

using namespace itupred;

namespace {

const ConceptLexicon& lexicon() {
  static const ConceptLexicon lex =
      ConceptLexicon::compile(load_lexicon_entries(testing::data_dir() / "lexicon.tsv"));
  return lex;
}

GeneratorConfig config(std::size_t ward, std::size_t planned, std::size_t unplanned) {
  GeneratorConfig g;
  g.ward = ward;
  g.planned = planned;
  g.unplanned = unplanned;
  g.profiles = load_profiles(testing::data_dir() / "profiles.tsv");
  return g;
}

}  // namespace

TEST_CASE("same seed gives byte-identical corpora") {
  testing::TempDir dir("gen");
  const auto g = config(30, 10, 5);
  save_corpus(generate_corpus(g, lexicon()), dir / "a.jsonl");
  save_corpus(generate_corpus(g, lexicon()), dir / "b.jsonl");
  CHECK(testing::read_file(dir / "a.jsonl") == testing::read_file(dir / "b.jsonl"));
  CHECK(testing::read_file(dir / "a.gold.jsonl") == testing::read_file(dir / "b.gold.jsonl"));

  auto other = g;
  other.seed = 8;
  save_corpus(generate_corpus(other, lexicon()), dir / "c.jsonl");
  CHECK(testing::read_file(dir / "a.jsonl") != testing::read_file(dir / "c.jsonl"));
}

TEST_CASE("cohort sizes are exact at paper scale") {
  const Corpus c = generate_corpus(config(1832, 349, 87), lexicon());
  std::map<AdmissionClass, std::size_t> n;
  for (const auto& p : c.patients) ++n[p.label];
  CHECK(n[AdmissionClass::Ward] == 1832);
  CHECK(n[AdmissionClass::PlannedITU] == 349);
  CHECK(n[AdmissionClass::UnplannedITU] == 87);
  CHECK(validate_corpus(c).empty());

  SUBCASE("demographic marginals follow the configured fractions") {
    double male = 0, white = 0;
    for (const auto& p : c.patients) {
      male += p.demographics.sex == Sex::Male;
      white += p.demographics.ethnicity == Ethnicity::White;
      CHECK(p.demographics.age >= 16);
      CHECK(p.demographics.age <= 95);
    }
    const double n_total = static_cast<double>(c.patients.size());
    // Binomial sd at n=2268 is about 0.0105; allow 4 sd.
    CHECK(std::abs(male / n_total - 0.49) < 0.042);
    CHECK(std::abs(white / n_total - 0.60) < 0.042);
  }
}

TEST_CASE("gold annotations have exact spans over known concepts") {
  const Corpus c = generate_corpus(config(40, 15, 5), lexicon());
  std::map<std::string, const Note*> notes;
  for (const auto& p : c.patients)
    for (const auto& n : p.notes) notes[n.note_id] = &n;
  std::size_t mentions = 0, distractors = 0;
  for (const auto& [note_id, list] : c.gold) {
    REQUIRE(notes.count(note_id));
    const std::string& text = notes[note_id]->text;
    for (const auto& a : list) {
      ++mentions;
      distractors += !a.meta.relevant();
      CHECK(a.note_id == note_id);
      REQUIRE(a.end <= text.size());
      CHECK(text.substr(a.start, a.end - a.start) == a.surface);
      CHECK(lexicon().find(a.concept_id) != nullptr);
    }
  }
  CHECK(mentions > 0);
  CHECK(distractors > 0);
}

TEST_CASE("annotator reproduces generator gold when distractors use shipped triggers") {
  const Corpus c = generate_corpus(config(40, 15, 5), lexicon());
  const ContextRules rules(load_context_rules(testing::data_dir() / "triggers.txt"));
  const auto ev = evaluate_against_gold(filter_annotations(annotate_corpus(c, lexicon(), rules)),
                                        filter_annotations(c.gold));
  CHECK(ev.f1 == 1.0);
}

TEST_CASE("stragglers fall outside the window and some patients have none inside") {
  auto g = config(400, 100, 30);
  g.no_window_fraction = 0.05;
  const Corpus c = generate_corpus(g, lexicon());
  const WindowResult w = window_notes(c, g.window_days);
  CHECK(w.dropped_notes > 0);
  CHECK(!w.dropped_patients.empty());
  CHECK(w.dropped_patients.size() < c.patients.size() / 5);
}

TEST_CASE("a ward-only planted concept reports ratio NA downstream") {
  const Corpus c = generate_corpus(config(300, 80, 20), lexicon());
  const FeatureSet fs = build_features(c, filter_annotations(c.gold), 2);
  const RatioReport r = concept_ratio_report(fs, 1000, 1.0);
  std::map<std::string, double> itu_rate;
  for (const auto& p : load_profiles(testing::data_dir() / "profiles.tsv")) itu_rate[p.concept_id] = p.itu_rate;
  std::size_t checked = 0;
  for (const auto& row : r.ward_enriched)
    if (itu_rate.count(row.concept_id) && itu_rate[row.concept_id] == 0.0) {
      CHECK_FALSE(row.ratio.has_value());
      ++checked;
    }
  CHECK(checked > 0);
}

TEST_CASE("invalid generator settings are config errors") {
  auto g = config(10, 5, 1);
  SUBCASE("empty ward") {
    g.ward = 0;
    CHECK_THROWS_AS(validate_generator_config(g), ConfigError);
  }
  SUBCASE("fraction above one") {
    g.male_fraction = 1.5;
    CHECK_THROWS_AS(validate_generator_config(g), ConfigError);
  }
  SUBCASE("inverted notes range") {
    g.notes_min = 5;
    g.notes_max = 2;
    CHECK_THROWS_AS(validate_generator_config(g), ConfigError);
  }
  SUBCASE("unknown profile concept") {
    g.profiles.push_back({"not_a_concept", 0.1, 0.1});
    CHECK_THROWS(generate_corpus(g, lexicon()));
  }
}
