#include <doctest.h>

#include <random>

#include "itupred/annotator.h"
#include "itupred/error.h"
#include "support.h"

using namespace itupred;

namespace {

ContextRuleSet default_triggers() {
  ContextRuleSet s;
  s.negation_triggers = {"no", "not", "denies", "no evidence of", "negative for", "-negative"};
  s.experiencer_triggers = {"family history of", "mother", "father"};
  s.certainty_triggers = {"suspected", "possible", "query", "?"};
  return s;
}

const ContextRules& rules() {
  static const ContextRules r(default_triggers());
  return r;
}

ConceptLexicon small_lexicon() {
  return ConceptLexicon::compile({
      {"C1", "intracranial meningioma", {}},
      {"C2", "meningioma", {}},
      {"C3", "osteoporosis", {"brittle bones"}},
      {"C4", "intracranial aneurysm", {}},
      {"C5", "pain", {}},
  });
}

std::vector<Annotation> run(const std::string& text, const ConceptLexicon& lex) {
  Note n;
  n.note_id = "N1";
  n.patient_id = "P1";
  n.text = text;
  return annotate(n, lex, rules());
}

Annotation with(Negation n, Experiencer e, Certainty c) {
  Annotation a{"N1", "C3", 0, 12, "osteoporosis", {}};
  a.meta = {n, e, c};
  return a;
}

}  // namespace

TEST_CASE("tokenizer") {
  const TokenizedText t("Known osteoporosis. No pain");
  REQUIRE(t.size() == 4);
  CHECK(t.tokens()[1].norm == "osteoporosis");
  CHECK(t.tokens()[2].norm == "no");
  CHECK(t.boundary_before(2));
  CHECK_FALSE(t.boundary_before(1));
  CHECK(t.gap_before(4).empty());
}

TEST_CASE("lexicon compilation") {
  SUBCASE("single entry matches") {
    const auto lex = ConceptLexicon::compile({{"C1", "intracranial meningioma", {}}});
    const auto a = run("intracranial meningioma", lex);
    REQUIRE(a.size() == 1);
    CHECK(a[0].concept_id == "C1");
  }
  SUBCASE("duplicate id is rejected") {
    CHECK_THROWS_AS(ConceptLexicon::compile({{"C1", "a", {}}, {"C1", "b", {}}}), LexiconError);
  }
  SUBCASE("surface shared by two concepts is rejected") {
    CHECK_THROWS_AS(ConceptLexicon::compile({{"C1", "pain", {}}, {"C2", "ache", {"Pain"}}}),
                    LexiconError);
  }
  SUBCASE("empty list and token-less surfaces are rejected") {
    CHECK_THROWS_AS(ConceptLexicon::compile({}), LexiconError);
    CHECK_THROWS_AS(ConceptLexicon::compile({{"C1", "--", {}}}), LexiconError);
  }
  SUBCASE("8,300 entries compile without collision") {
    std::vector<LexiconEntry> entries;
    for (int i = 0; i < 8300; ++i)
      entries.push_back({"c" + std::to_string(i), "concept term " + std::to_string(i),
                         {"alt " + std::to_string(i) + " form"}});
    const auto lex = ConceptLexicon::compile(entries);
    CHECK(lex.entries().size() == 8300);
    CHECK(lex.surface_count() == 16600);
    const auto a = run("noted concept term 4711 and alt 12 form", lex);
    REQUIRE(a.size() == 2);
    CHECK(a[0].concept_id == "c4711");
    CHECK(a[1].concept_id == "c12");
  }
  SUBCASE("shipped lexicon loads") {
    const auto lex = ConceptLexicon::compile(load_lexicon_entries(testing::data_dir() / "lexicon.tsv"));
    CHECK(lex.entries().size() > 40);
    CHECK(lex.find("intracranial_meningioma") != nullptr);
  }
}

TEST_CASE("annotate") {
  const auto lex = small_lexicon();
  SUBCASE("empty text") { CHECK(run("", lex).empty()); }
  SUBCASE("two plain mentions with default flags") {
    const auto a = run("known intracranial meningioma and osteoporosis", lex);
    REQUIRE(a.size() == 2);
    CHECK(a[0].concept_id == "C1");
    CHECK(a[1].concept_id == "C3");
    CHECK(a[0].meta == MetaFlags{});
    CHECK(a[1].meta == MetaFlags{});
  }
  SUBCASE("longest match wins") {
    const auto a = run("intracranial meningioma", lex);
    REQUIRE(a.size() == 1);
    CHECK(a[0].concept_id == "C1");
    CHECK(a[0].surface == "intracranial meningioma");
  }
  SUBCASE("case-insensitive with original surface preserved") {
    const auto a = run("Brittle Bones noted", lex);
    REQUIRE(a.size() == 1);
    CHECK(a[0].concept_id == "C3");
    CHECK(a[0].surface == "Brittle Bones");
  }
  SUBCASE("matches stop at token boundaries") { CHECK(run("painful osteoporosisx", lex).empty()); }
  SUBCASE("matches do not cross a sentence terminator") {
    CHECK(run("intracranial. meningioma", lex).size() == 1);
  }
  SUBCASE("byte offsets survive multi-byte text") {
    const std::string text = "Patient \xC3\xA9valu\xC3\xA9 \xE2\x80\x94 osteoporosis";
    const auto a = run(text, lex);
    REQUIRE(a.size() == 1);
    CHECK(text.substr(a[0].start, a[0].end - a[0].start) == "osteoporosis");
  }
}

TEST_CASE("context classification") {
  const auto lex = small_lexicon();
  auto flags = [&](const std::string& text) {
    const auto a = run(text, lex);
    REQUIRE(a.size() == 1);
    return a[0].meta;
  };
  CHECK(flags("no evidence of osteoporosis").negation == Negation::Yes);
  CHECK(flags("denies pain").negation == Negation::Yes);
  CHECK(flags("osteoporosis-negative").negation == Negation::Yes);
  CHECK(flags("family history of intracranial aneurysm").experiencer == Experiencer::Other);
  CHECK(flags("mother had osteoporosis").experiencer == Experiencer::Other);
  CHECK(flags("suspected osteoporosis").certainty == Certainty::Suspected);
  CHECK(flags("? osteoporosis").certainty == Certainty::Suspected);
  SUBCASE("a trigger after a sentence boundary is out of scope") {
    const auto a = run("osteoporosis. no pain", lex);
    REQUIRE(a.size() == 2);
    CHECK(a[0].meta.negation == Negation::No);
    CHECK(a[1].meta.negation == Negation::Yes);
  }
  SUBCASE("trigger outside the scope window does not fire") {
    CHECK(flags("no one two three four five six osteoporosis").negation == Negation::No);
    CHECK(flags("no one two three four osteoporosis").negation == Negation::Yes);
  }
  SUBCASE("trigger must be a whole token") {
    CHECK(flags("nothing osteoporosis").negation == Negation::No);
  }
}

TEST_CASE("spans are faithful and annotate is deterministic") {
  const auto lex = ConceptLexicon::compile(load_lexicon_entries(testing::data_dir() / "lexicon.tsv"));
  std::mt19937_64 rng(3);
  std::vector<std::string> words;
  for (const auto& e : lex.entries()) words.push_back(e.canonical_name);
  for (const char* w : {"no", "mother", "?", ".", "and", "suspected", "Possible", "-negative", ","})
    words.emplace_back(w);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    for (int k = 0; k < 25; ++k) text += words[rng() % words.size()] + (rng() % 3 ? " " : "");
    Note n{"N", "P", Date(2020, 1, 1), text};
    const auto a = annotate(n, lex, rules());
    for (const auto& m : a) CHECK(text.substr(m.start, m.end - m.start) == m.surface);
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].end <= a[i].start);
    CHECK(annotate(n, lex, rules()) == a);
  }
}

TEST_CASE("filter_annotations") {
  const Annotation keep = with(Negation::No, Experiencer::Patient, Certainty::Confirmed);
  CHECK(filter_annotations(std::vector<Annotation>{with(Negation::Yes, Experiencer::Patient,
                                                        Certainty::Confirmed)})
            .empty());
  CHECK(filter_annotations(std::vector<Annotation>{keep, keep}).size() == 2);
  const std::vector<Annotation> mixed = {
      keep, with(Negation::No, Experiencer::Patient, Certainty::Suspected), keep};
  const auto out = filter_annotations(mixed);
  CHECK(out.size() == 2);
  CHECK(filter_annotations(out) == out);

  SUBCASE("output is a subset of the input over every flag combination") {
    std::vector<Annotation> all;
    for (auto n : {Negation::No, Negation::Yes})
      for (auto e : {Experiencer::Patient, Experiencer::Other})
        for (auto c : {Certainty::Confirmed, Certainty::Suspected}) all.push_back(with(n, e, c));
    const auto f = filter_annotations(all);
    REQUIRE(f.size() == 1);
    CHECK(f[0] == keep);
  }
}

TEST_CASE("evaluate_against_gold") {
  auto mention = [](const std::string& note, const std::string& cid, std::size_t start) {
    return Annotation{note, cid, start, start + 3, "abc", {}};
  };
  AnnotationIndex gold;
  gold["N1"] = {mention("N1", "A", 0), mention("N1", "A", 10), mention("N1", "B", 20),
                mention("N1", "B", 30)};

  SUBCASE("identical sets") {
    const auto ev = evaluate_against_gold(gold, gold);
    CHECK(ev.precision == 1.0);
    CHECK(ev.recall == 1.0);
    CHECK(ev.f1 == 1.0);
    CHECK(ev.macro_f1 == 1.0);
  }
  SUBCASE("nothing predicted") {
    const auto ev = evaluate_against_gold({}, gold);
    CHECK(ev.recall == 0.0);
    CHECK(ev.precision == 0.0);
    CHECK(ev.precision_undefined);
  }
  SUBCASE("macro F1 over one perfect and one half-recalled concept") {
    AnnotationIndex pred;
    pred["N1"] = {mention("N1", "A", 0), mention("N1", "A", 10), mention("N1", "B", 20)};
    // Hand oracle: A has P=R=1; B has P=1, R=1/2 so F1 = 2*1*0.5/1.5.
    const double f1_b = 2.0 * 1.0 * 0.5 / (1.0 + 0.5);
    const double oracle = (1.0 + f1_b) / 2.0;
    const auto ev = evaluate_against_gold(pred, gold);
    CHECK(ev.macro_f1 == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(ev.macro_f1 == doctest::Approx(0.8333).epsilon(1e-4));
    CHECK(ev.per_concept.at("B").recall == 0.5);
    CHECK(ev.precision == 1.0);
    CHECK(ev.recall == 0.75);
  }
  SUBCASE("a shifted span is both a false positive and a false negative") {
    AnnotationIndex pred;
    pred["N1"] = {mention("N1", "A", 1)};
    AnnotationIndex g;
    g["N1"] = {mention("N1", "A", 0)};
    const auto ev = evaluate_against_gold(pred, g);
    CHECK(ev.per_concept.at("A").false_positive == 1);
    CHECK(ev.per_concept.at("A").false_negative == 1);
    CHECK(ev.f1 == 0.0);
  }
}

TEST_CASE("trigger file parsing") {
  testing::TempDir dir("trig");
  testing::write_file(dir / "t.txt", "[settings]\nscope_window = 3\n[negation]\nno\n# c\n[certainty]\n?\n");
  const auto s = load_context_rules(dir / "t.txt");
  CHECK(s.scope_window == 3);
  CHECK(s.negation_triggers == std::vector<std::string>{"no"});
  CHECK(s.certainty_triggers == std::vector<std::string>{"?"});
  testing::write_file(dir / "bad.txt", "[bogus]\nno\n");
  CHECK_THROWS_AS(load_context_rules(dir / "bad.txt"), ParseError);
}
