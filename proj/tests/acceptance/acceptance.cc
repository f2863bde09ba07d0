// Acceptance suite: one PASS/FAIL line per criterion; exits non-zero when any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>

#include <fmt/format.h>

#include "itupred/annotator.h"
#include "itupred/cohort.h"
#include "itupred/eval.h"
#include "itupred/explain.h"
#include "itupred/forest.h"
#include "itupred/generator.h"
#include "itupred/pipeline.h"
#include "itupred/seqmodel.h"
#include "support.h"

using namespace itupred;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

const ConceptLexicon& lexicon() {
  static const ConceptLexicon lex =
      ConceptLexicon::compile(load_lexicon_entries(testing::data_dir() / "lexicon.tsv"));
  return lex;
}

PipelineConfig default_config() {
  return make_pipeline_config(ConfigFile::load(testing::config_dir() / "default.conf"), std::nullopt);
}

GeneratorConfig default_generator() {
  GeneratorConfig g = default_config().generator;
  g.profiles = load_profiles(testing::data_dir() / "profiles.tsv");
  return g;
}

// 1. Annotator gold fidelity.
Outcome annotator_fidelity() {
  const auto t0 = Clock::now();
  const ContextRules rules(load_context_rules(testing::data_dir() / "triggers.txt"));
  auto f1_for = [&](double out_of_rule) {
    GeneratorConfig g = default_generator();
    g.out_of_rule_fraction = out_of_rule;
    const Corpus c = generate_corpus(g, lexicon());
    return evaluate_against_gold(filter_annotations(annotate_corpus(c, lexicon(), rules)),
                                 filter_annotations(c.gold))
        .f1;
  };
  const double clean = f1_for(0.0);
  const double noisy = f1_for(0.1);
  const double secs = seconds_since(t0);
  return {clean == 1.0 && noisy >= 0.95 && secs < 30.0,
          fmt::format("F1 {:.4f} (shipped triggers), {:.4f} (10% out-of-rule); {:.1f}s", clean, noisy,
                      secs)};
}

// 2. Chi-squared against a closed-form contingency oracle.
Outcome chi2_oracle() {
  auto oracle = [](const Table2x2& t) {
    const double a = t[0][0], b = t[0][1], c = t[1][0], d = t[1][1], n = a + b + c + d;
    const double num = n * (a * d - b * c) * (a * d - b * c);
    return num / ((a + b) * (c + d) * (a + c) * (b + d));
  };
  double worst = 0.0;
  std::mt19937_64 rng(2);
  std::vector<Table2x2> tables = {Table2x2{{{20, 80}, {40, 60}}}};
  while (tables.size() < 200) {
    Table2x2 t;
    for (auto& row : t)
      for (auto& v : row) v = static_cast<double>(1 + rng() % 500);
    tables.push_back(t);
  }
  for (const auto& t : tables) worst = std::max(worst, std::abs(chi2_2x2(t).statistic - oracle(t)));
  const double hand = chi2_2x2(tables[0]).statistic;
  return {worst < 1e-9 && std::abs(hand - 9.5238) < 5e-5,
          fmt::format("max |delta| {:.2e} over 200 tables; [[20,80],[40,60]] -> {:.4f}", worst, hand)};
}

// 3. Planted ward-enriched concepts are recovered.
Outcome descriptive_stats() {
  const PipelineConfig cfg = default_config();
  const GeneratorConfig g = default_generator();
  const ContextRules rules(load_context_rules(cfg.triggers));
  const Corpus c = generate_corpus(g, lexicon());
  const WindowResult w = window_notes(c, cfg.window_days);
  const FeatureSet fs =
      build_features(w.corpus, filter_annotations(annotate_corpus(w.corpus, lexicon(), rules)), cfg.min_count);
  const RatioReport r = concept_ratio_report(fs, cfg.ratio_top_n, cfg.ratio_alpha);

  double ward_notes = 0;
  for (const auto& p : w.corpus.patients)
    if (p.label == AdmissionClass::Ward) ward_notes += static_cast<double>(p.notes.size());
  std::map<std::string, const ConceptRatioRow*> listed;
  for (const auto& row : r.ward_enriched) listed[row.concept_id] = &row;

  std::size_t planted = 0, found = 0, absent = 0, na = 0;
  std::vector<std::string> missing;
  for (const auto& p : g.profiles) {
    const double expected = p.ward_rate * ward_notes;
    const bool strong = p.itu_rate == 0.0 ? p.ward_rate > 0.0 : p.ward_rate / p.itu_rate >= 100.0;
    if (strong && expected >= 50.0) {
      ++planted;
      auto it = listed.find(p.concept_id);
      if (it != listed.end() && it->second->p < 0.05) ++found;
      else missing.push_back(p.concept_id);
    }
    if (p.itu_rate == 0.0 && p.ward_rate > 0.0) {
      ++absent;
      auto it = listed.find(p.concept_id);
      if (it != listed.end() && !it->second->ratio) ++na;
      else missing.push_back(p.concept_id + "(ratio)");
    }
  }
  return {planted > 0 && found == planted && na == absent,
          fmt::format("{}/{} planted ward concepts in top-{} with p<0.05; {}/{} ITU-absent report NA{}", found,
                      planted, cfg.ratio_top_n, na, absent,
                      missing.empty() ? "" : "; missing " + fmt::format("{}", fmt::join(missing, ",")))};
}

// 4. Split protocol over 50 seeds.
Outcome split_protocol() {
  std::vector<LabeledId> ids;
  auto add = [&](const char* prefix, std::size_t n, AdmissionClass c) {
    for (std::size_t i = 0; i < n; ++i) ids.push_back({fmt::format("{}{:05d}", prefix, i), c});
  };
  add("W", 1812, AdmissionClass::Ward);
  add("P", 290, AdmissionClass::PlannedITU);
  add("U", 75, AdmissionClass::UnplannedITU);
  auto tally = [&](const std::set<std::string>& in) {
    std::array<std::size_t, 3> n{};
    for (const auto& p : ids)
      if (in.count(p.patient_id)) ++n[static_cast<std::size_t>(p.label)];
    return n;
  };
  std::size_t balanced_ok = 0, layout_ok = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SplitConfig cfg;
    cfg.seed = seed;
    cfg.planned_test = 135;
    const auto s = make_splits(ids, cfg);
    const auto tr = tally(s.train), te = tally(s.test);
    const auto W = static_cast<std::size_t>(AdmissionClass::Ward);
    const auto P = static_cast<std::size_t>(AdmissionClass::PlannedITU);
    const auto U = static_cast<std::size_t>(AdmissionClass::UnplannedITU);
    balanced_ok += tr[U] == 0 && te[W] == te[P] + te[U] && te[P] == 135 && te[U] == 75 &&
                   s.train.size() + s.test.size() == ids.size();

    cfg.ward_test = 201;
    const auto t2 = make_splits(ids, cfg);
    const auto tr2 = tally(t2.train), te2 = tally(t2.test);
    layout_ok += tr2 == std::array<std::size_t, 3>{1611, 155, 0} &&
                 te2 == std::array<std::size_t, 3>{201, 135, 75};
  }
  return {balanced_ok == 50 && layout_ok == 50,
          fmt::format("balanced test (135/75/210) with no unplanned in train: {}/50 seeds; "
                      "ward_test=201 layout train 155/0/1611 test 135/75/201: {}/50 seeds",
                      balanced_ok, layout_ok)};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      fmt::format("\"{}\" {} >\"{}\" 2>&1", ITUPRED_CLI, args, log.string());
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct FullRuns {
  fs::path a, b;
  int code_a = -1, code_b = -1;
  double seconds_a = 0.0;
};

const FullRuns& full_runs(const testing::TempDir& dir) {
  static FullRuns runs = [&] {
    FullRuns r;
    r.a = dir / "run_a";
    r.b = dir / "run_b";
    const std::string conf = (testing::config_dir() / "default.conf").string();
    const auto t0 = Clock::now();
    r.code_a = run_cli(fmt::format("all -c \"{}\" -o \"{}\"", conf, r.a.string()), dir / "run_a.log");
    r.seconds_a = seconds_since(t0);
    r.code_b = run_cli(fmt::format("all -c \"{}\" -o \"{}\"", conf, r.b.string()), dir / "run_b.log");
    return r;
  }();
  return runs;
}

// 5. Planted-signal prediction on the default corpus.
Outcome planted_prediction(const testing::TempDir& dir) {
  const FullRuns& r = full_runs(dir);
  if (r.code_a != 0) return {false, fmt::format("pipeline exited with {}", r.code_a)};
  std::map<std::string, std::array<double, 4>> m;
  for (const auto& row : load_run_metrics(r.a / "eval" / "run_metrics.tsv"))
    m[row.model + "/" + row.group] = {row.values[0], row.values[1], row.values[2], row.values[3]};
  const double itu_r = m["rf/ITU"][1], itu_p = m["rf/ITU"][0], ward_r = m["rf/Ward"][1];
  const double fn_u = m["rf/Unplanned"][3], rf_f1 = m["rf/ITU"][2], lstm_f1 = m["lstm/ITU"][2];
  const bool ok = itu_r >= 0.85 && itu_p >= 0.95 && ward_r >= 0.95 && fn_u <= 0.15 &&
                  lstm_f1 <= rf_f1 + 0.02 && r.seconds_a < 600.0;
  return {ok, fmt::format("RF over 5 seeds: ITU recall {:.3f}, ITU precision {:.3f}, ward recall {:.3f}, "
                          "unplanned FN {:.3f}; ITU F1 RF {:.3f} vs LSTM {:.3f}; full run {:.0f}s",
                          itu_r, itu_p, ward_r, fn_u, rf_f1, lstm_f1, r.seconds_a)};
}

// 6. Missed-unplanned arithmetic.
Outcome missed_unplanned() {
  const auto r = missed_unplanned_reduction(75, 135, 0.11);
  return {std::abs(r.residual - 0.0393) < 5e-5 && std::abs(r.baseline - 0.357) < 5e-4,
          fmt::format("baseline {:.4f}, residual {:.4f}", r.baseline, r.residual)};
}

// 7. LSTM gradient check.
Outcome gradient_check_outcome() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t K = 2 + rng() % 5, H = 2 + rng() % 7, T = 1 + rng() % 6;
    LstmConfig c;
    c.hidden_size = H;
    c.precision = Precision::High;
    c.seed = rng();
    LstmModel m = init_lstm(K, c);
    for (Eigen::Index i = 0; i < m.b.size(); ++i) m.b(i) = g(rng);
    m.b_out = g(rng);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(K));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 2.0 * g(rng);
    worst = std::max(worst, gradient_check(m, x, static_cast<int>(rng() % 2), 1e-5));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt::format("max relative error {:.2e} over 10 configurations; {:.2f}s", worst, secs)};
}

// 8. Bootstrap behavior.
Outcome bootstrap_behavior() {
  const auto flat = bootstrap_ci([](std::span<const std::size_t>) -> Metric { return 0.8; }, 200, 1000, 1);
  const double width = *flat.upper - *flat.lower;
  std::mt19937_64 rng(8);
  std::bernoulli_distribution b(0.8);
  int covered = 0;
  for (int t = 0; t < 500; ++t) {
    std::vector<int> correct(200);
    for (auto& c : correct) c = b(rng);
    const auto ci = bootstrap_ci(
        [&](std::span<const std::size_t> idx) -> Metric {
          double s = 0;
          for (auto i : idx) s += correct[i];
          return s / static_cast<double>(idx.size());
        },
        200, 1000, static_cast<std::uint64_t>(t));
    covered += *ci.lower <= 0.8 && 0.8 <= *ci.upper;
  }
  const double coverage = covered / 500.0;
  return {width == 0.0 && coverage >= 0.92 && coverage <= 0.98,
          fmt::format("constant-metric width {}; Bernoulli(0.8) coverage {:.3f} over 500 trials", width,
                      coverage)};
}

// 9. Calibration of an oracle-probability model (one fixed draw).
Outcome calibration_sanity() {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> y(5000);
  std::vector<double> p(5000);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(rng);
    y[i] = u(rng) < p[i];
  }
  const auto c = calibration_curve(y, p, 10);
  double worst = 0.0;
  std::size_t total = 0;
  for (const auto& b : c.bins) {
    worst = std::max(worst, std::abs(b.observed_rate - b.mean_predicted));
    total += b.count;
  }
  return {worst < 0.05 && total == 5000,
          fmt::format("max bin deviation {:.4f} over {} bins; counts sum to {}", worst, c.bins.size(), total)};
}

// 10. Shapley properties.
Outcome shapley_properties() {
  auto counts = [](Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = static_cast<double>(rng() % 4);
    return X;
  };
  auto forest = [&](Eigen::Index d, std::uint64_t seed, std::size_t trees) {
    const Eigen::MatrixXd X = counts(100, d, seed);
    std::vector<int> y(100);
    for (Eigen::Index i = 0; i < 100; ++i)
      y[static_cast<std::size_t>(i)] = X(i, 0) + X(i, 1) + static_cast<double>(i % 3) > 4.0;
    ForestConfig c;
    c.n_trees = trees;
    c.seed = seed;
    return fit_forest(X, y, c);
  };
  ShapleyConfig exact;
  exact.method = ShapleyMethod::Exact;

  double efficiency = 0.0, null_phi = 0.0;
  std::size_t null_features = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Eigen::Index d = 4 + static_cast<Eigen::Index>(s % 5);
    // The last column is constant in training, so no tree can split on it.
    Eigen::MatrixXd X = counts(100, d, s);
    X.col(d - 1).setConstant(2.0);
    std::vector<int> y(100);
    for (Eigen::Index i = 0; i < 100; ++i)
      y[static_cast<std::size_t>(i)] = X(i, 0) + X(i, 1) + static_cast<double>(i % 3) > 4.0;
    ForestConfig c;
    c.n_trees = 10;
    c.seed = s;
    const ForestModel m = fit_forest(X, y, c);
    const BatchModel f = as_batch_model(m);
    const Eigen::VectorXd x = counts(1, d, s + 500).row(0).transpose();
    const auto a = shapley_values(f, x, counts(12, d, s + 900), exact);
    efficiency = std::max(efficiency, std::abs(a.phi.sum() - (a.prediction - a.baseline)));
    null_phi = std::max(null_phi, std::abs(a.phi(d - 1)));
    ++null_features;
  }

  const ForestModel m8 = forest(8, 88, 30);
  const BatchModel f8 = as_batch_model(m8);
  const Eigen::MatrixXd bg = counts(20, 8, 89);
  ShapleyConfig sampled;
  sampled.permutations = 2000;
  sampled.seed = 3;
  double delta = 0.0;
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Eigen::VectorXd x = counts(1, 8, 300 + k).row(0).transpose();
    delta = std::max(delta, (shapley_values(f8, x, bg, exact).phi - shapley_values(f8, x, bg, sampled).phi)
                                .cwiseAbs()
                                .maxCoeff());
  }
  return {efficiency < 1e-6 && null_phi == 0.0 && delta < 0.02,
          fmt::format("efficiency gap {:.1e} and null-player |phi| {} over 20 forests; "
                      "sampled(2000) vs exact at d=8 max |delta| {:.4f}",
                      efficiency, null_phi, delta)};
}

// 11. Parity with labels independent of demographics.
Outcome parity_sanity() {
  // A deliberately weak planted signal keeps recall near one half, where the
  // FN ratio is estimated most tightly.
  GeneratorConfig g;
  g.seed = 11;
  g.ward = 26000;
  g.planned = 26000;
  g.unplanned = 0;
  g.straggler_fraction = 0.0;
  g.no_window_fraction = 0.0;
  g.negated_rate = g.family_rate = g.suspected_rate = 0.0;
  g.filler_rate = 0.0;
  const auto shipped = load_profiles(testing::data_dir() / "profiles.tsv");
  g.profiles = {{shipped[0].concept_id, 0.10, 0.22},
                {shipped[1].concept_id, 0.22, 0.10},
                {shipped[2].concept_id, 0.15, 0.15},
                {shipped[3].concept_id, 0.15, 0.15}};
  const Corpus c = generate_corpus(g, lexicon());
  const WindowResult w = window_notes(c, g.window_days);
  const FeatureSet fs = build_features(w.corpus, filter_annotations(w.corpus.gold), 1);

  SplitConfig sc;
  sc.seed = 11;
  sc.planned_test = 22000;
  const SplitAssignment split = make_splits(labeled_ids(fs.patients), sc);

  std::vector<Eigen::Index> train_rows, test_rows;
  for (std::size_t i = 0; i < fs.patients.size(); ++i)
    (split.test.count(fs.patients[i].patient_id) ? test_rows : train_rows)
        .push_back(static_cast<Eigen::Index>(i));
  auto matrix = [&](const std::vector<Eigen::Index>& rows) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(fs.vocabulary.size()));
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      for (Eigen::Index j = 0; j < X.cols(); ++j)
        X(r, j) = fs.patients[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])]
                      .counts[static_cast<std::size_t>(j)];
    return X;
  };
  std::vector<int> y_train;
  for (auto r : train_rows) y_train.push_back(is_itu(fs.patients[static_cast<std::size_t>(r)].label));
  ForestConfig fc;
  fc.n_trees = 100;
  fc.seed = 11;
  const ForestModel model = fit_forest(matrix(train_rows), y_train, fc);
  const Eigen::VectorXd p = predict_proba(model, matrix(test_rows));

  std::vector<AdmissionClass> truth;
  std::vector<Demographics> demo;
  std::vector<int> pred;
  for (std::size_t k = 0; k < test_rows.size(); ++k) {
    const auto& pf = fs.patients[static_cast<std::size_t>(test_rows[k])];
    truth.push_back(pf.label);
    demo.push_back(pf.demographics);
    pred.push_back(predict_positive(p(static_cast<Eigen::Index>(k))) ? 1 : 0);
  }
  const auto overall = classification_metrics(truth, pred);
  double lo = 1.0, hi = 1.0;
  std::size_t defined = 0;
  for (auto axis : {ParityAxis::Sex, ParityAxis::Ethnicity}) {
    const auto r = parity_by(axis, truth, pred, demo);
    for (const auto& row : r.cells)
      for (const auto& cell : row)
        if (cell.ratio) {
          lo = std::min(lo, *cell.ratio);
          hi = std::max(hi, *cell.ratio);
          ++defined;
        }
  }
  return {test_rows.size() >= 2000 && defined > 0 && lo >= 0.95 && hi <= 1.05,
          fmt::format("test n {} (ITU recall {:.3f}); {} defined ratios in [{:.3f}, {:.3f}]", test_rows.size(),
                      *overall[ReportGroup::ITU].recall, defined, lo, hi)};
}

// 12. Determinism of two full runs.
Outcome determinism(const testing::TempDir& dir) {
  const FullRuns& r = full_runs(dir);
  if (r.code_a != 0 || r.code_b != 0)
    return {false, fmt::format("pipeline exit codes {} and {}", r.code_a, r.code_b)};
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::recursive_directory_iterator(r.a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), r.a);
    ++compared;
    if (!fs::exists(r.b / rel) || testing::read_file(e.path()) != testing::read_file(r.b / rel))
      differing.push_back(rel.string());
  }
  std::size_t in_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(r.b)) in_b += e.is_regular_file();
  return {compared > 0 && differing.empty() && in_b == compared,
          fmt::format("{} artifacts compared, {} differ", compared, differing.size())};
}

}  // namespace

int main() {
  testing::TempDir dir("acceptance");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"annotator gold fidelity", annotator_fidelity},
      {"chi-squared oracle equivalence", chi2_oracle},
      {"descriptive-stats recovery", descriptive_stats},
      {"split protocol", split_protocol},
      {"planted-signal prediction", [&] { return planted_prediction(dir); }},
      {"missed-unplanned arithmetic", missed_unplanned},
      {"LSTM gradient check", gradient_check_outcome},
      {"bootstrap behavior", bootstrap_behavior},
      {"calibration sanity", calibration_sanity},
      {"Shapley properties", shapley_properties},
      {"parity sanity", parity_sanity},
      {"determinism", [&] { return determinism(dir); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << fmt::format("{} {:>2} {}: {}", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail)
              << std::endl;
  }
  std::cout << fmt::format("{}/{} criteria passed", criteria.size() - static_cast<std::size_t>(failed),
                           criteria.size())
            << std::endl;
  return failed == 0 ? 0 : 1;
}
