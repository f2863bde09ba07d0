#include "itupred/pipeline.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "itupred/annotator.h"
#include "itupred/cohort.h"
#include "itupred/error.h"
#include "itupred/eval.h"
#include "itupred/explain.h"
#include "itupred/io.h"
#include "itupred/plot.h"
#include "itupred/rng.h"

namespace itupred {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "paths.lexicon", "paths.triggers", "paths.profiles", "paths.corpus", "output.dir",
      "generator.seed", "generator.ward", "generator.planned", "generator.unplanned",
      "generator.notes_min", "generator.notes_max", "generator.window_days",
      "generator.straggler_fraction", "generator.no_window_fraction", "generator.negated_rate",
      "generator.family_rate", "generator.suspected_rate", "generator.out_of_rule_fraction",
      "generator.filler_rate", "generator.male_fraction", "generator.white_fraction",
      "generator.age_median", "generator.age_sd", "generator.first_operation",
      "generator.last_operation", "cohort.window_days", "cohort.min_count",
      "cohort.ratio_top_n", "cohort.ratio_alpha", "split.seed", "split.planned_test",
      "split.ward_test", "features.k", "forest.n_trees", "forest.max_depth",
      "forest.min_samples_split", "forest.min_samples_leaf", "forest.features_per_split",
      "forest.bootstrap", "forest.seed", "forest.runs", "cv.folds", "cv.runs", "lstm.epochs",
      "lstm.hidden_size", "lstm.batch_size", "lstm.num_layers", "lstm.dropout",
      "lstm.learning_rate", "lstm.seed", "lstm.precision", "lstm.runs", "eval.resamples",
      "eval.seed", "eval.calibration_bins", "explain.background", "explain.samples",
      "explain.permutations", "explain.seed", "explain.lime_perturbations",
      "explain.lime_kernel_width", "explain.lime_lambda", "explain.lime_patients"};
  return keys;
}

fs::path resolve_input(const ConfigFile& file, const std::string& key, const std::string& fallback) {
  const std::string raw = file.get_string(key, fallback);
  if (raw.empty()) return {};
  fs::path p(raw);
  if (p.is_relative()) p = file.base_dir() / p;
  return p.lexically_normal();
}

Date get_date(const ConfigFile& file, const std::string& key, Date fallback) {
  if (!file.has(key)) return fallback;
  auto d = Date::parse(file.get_string(key, ""));
  if (!d) throw ConfigError(fmt::format("{}: '{}' is not an ISO date", key, file.get_string(key, "")));
  return *d;
}

int get_int(const ConfigFile& file, const std::string& key, int fallback) {
  const auto v = file.get_uint(key, static_cast<std::uint64_t>(fallback));
  if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw ConfigError(fmt::format("{}: value too large", key));
  return static_cast<int>(v);
}

std::string opt(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : std::string("auto");
}

}  // namespace

PipelineConfig make_pipeline_config(const ConfigFile& file,
                                    const std::optional<fs::path>& output_override) {
  for (const auto& [key, value] : file.values())
    if (!known_keys().count(key)) throw ConfigError(fmt::format("unknown config key '{}'", key));

  PipelineConfig c;
  c.lexicon = resolve_input(file, "paths.lexicon", "../data/lexicon.tsv");
  c.triggers = resolve_input(file, "paths.triggers", "../data/triggers.txt");
  c.profiles = resolve_input(file, "paths.profiles", "../data/profiles.tsv");
  c.corpus = resolve_input(file, "paths.corpus", "");
  c.output_dir = output_override ? *output_override : fs::path(file.get_string("output.dir", "out"));

  auto& g = c.generator;
  g.seed = file.get_uint("generator.seed", g.seed);
  g.ward = file.get_uint("generator.ward", g.ward);
  g.planned = file.get_uint("generator.planned", g.planned);
  g.unplanned = file.get_uint("generator.unplanned", g.unplanned);
  g.notes_min = get_int(file, "generator.notes_min", g.notes_min);
  g.notes_max = get_int(file, "generator.notes_max", g.notes_max);
  g.window_days = get_int(file, "generator.window_days", g.window_days);
  g.straggler_fraction = file.get_double("generator.straggler_fraction", g.straggler_fraction);
  g.no_window_fraction = file.get_double("generator.no_window_fraction", g.no_window_fraction);
  g.negated_rate = file.get_double("generator.negated_rate", g.negated_rate);
  g.family_rate = file.get_double("generator.family_rate", g.family_rate);
  g.suspected_rate = file.get_double("generator.suspected_rate", g.suspected_rate);
  g.out_of_rule_fraction = file.get_double("generator.out_of_rule_fraction", g.out_of_rule_fraction);
  g.filler_rate = file.get_double("generator.filler_rate", g.filler_rate);
  g.male_fraction = file.get_double("generator.male_fraction", g.male_fraction);
  g.white_fraction = file.get_double("generator.white_fraction", g.white_fraction);
  g.age_median = get_int(file, "generator.age_median", g.age_median);
  g.age_sd = file.get_double("generator.age_sd", g.age_sd);
  g.first_operation = get_date(file, "generator.first_operation", g.first_operation);
  g.last_operation = get_date(file, "generator.last_operation", g.last_operation);

  c.window_days = get_int(file, "cohort.window_days", c.window_days);
  if (c.window_days < 1) throw ConfigError("cohort.window_days must be >= 1");
  c.min_count = file.get_uint("cohort.min_count", c.min_count);
  c.ratio_top_n = file.get_uint("cohort.ratio_top_n", c.ratio_top_n);
  c.ratio_alpha = file.get_double("cohort.ratio_alpha", c.ratio_alpha);

  c.split_seed = file.get_uint("split.seed", c.split_seed);
  c.planned_test = file.get_optional_uint("split.planned_test", c.planned_test);
  c.ward_test = file.get_optional_uint("split.ward_test", c.ward_test);

  c.k_features = file.get_uint("features.k", c.k_features);
  if (c.k_features < 1) throw ConfigError("features.k must be >= 1");

  auto& f = c.forest;
  f.n_trees = file.get_uint("forest.n_trees", f.n_trees);
  f.max_depth = file.get_optional_uint("forest.max_depth", f.max_depth);
  f.min_samples_split = file.get_uint("forest.min_samples_split", f.min_samples_split);
  f.min_samples_leaf = file.get_uint("forest.min_samples_leaf", f.min_samples_leaf);
  f.features_per_split = file.get_optional_uint("forest.features_per_split", f.features_per_split);
  f.bootstrap = file.get_bool("forest.bootstrap", f.bootstrap);
  f.seed = file.get_uint("forest.seed", 7);
  validate_forest_config(f, f.features_per_split.value_or(1));
  c.forest_runs = file.get_uint("forest.runs", c.forest_runs);
  c.cv_folds = file.get_uint("cv.folds", c.cv_folds);
  c.cv_runs = file.get_uint("cv.runs", c.cv_runs);
  if (c.forest_runs < 1) throw ConfigError("forest.runs must be >= 1");
  if (c.cv_folds < 2) throw ConfigError("cv.folds must be >= 2");

  auto& l = c.lstm;
  l.epochs = file.get_uint("lstm.epochs", l.epochs);
  l.hidden_size = file.get_uint("lstm.hidden_size", l.hidden_size);
  l.batch_size = file.get_uint("lstm.batch_size", l.batch_size);
  l.num_layers = file.get_uint("lstm.num_layers", l.num_layers);
  l.dropout = file.get_double("lstm.dropout", l.dropout);
  l.learning_rate = file.get_double("lstm.learning_rate", l.learning_rate);
  l.seed = file.get_uint("lstm.seed", 7);
  const std::string precision = file.get_string("lstm.precision", "standard");
  if (precision == "high") l.precision = Precision::High;
  else if (precision == "standard") l.precision = Precision::Standard;
  else throw ConfigError("lstm.precision must be 'high' or 'standard'");
  validate_lstm_config(l);
  c.lstm_runs = file.get_uint("lstm.runs", c.lstm_runs);
  if (c.lstm_runs < 1) throw ConfigError("lstm.runs must be >= 1");

  c.resamples = file.get_uint("eval.resamples", c.resamples);
  c.eval_seed = file.get_uint("eval.seed", c.eval_seed);
  c.calibration_bins = file.get_uint("eval.calibration_bins", c.calibration_bins);
  if (c.resamples < 1) throw ConfigError("eval.resamples must be >= 1");
  if (c.calibration_bins < 1) throw ConfigError("eval.calibration_bins must be >= 1");

  c.shap_background = file.get_uint("explain.background", c.shap_background);
  c.shap_samples = file.get_uint("explain.samples", c.shap_samples);
  c.shap_permutations = file.get_uint("explain.permutations", c.shap_permutations);
  c.explain_seed = file.get_uint("explain.seed", c.explain_seed);
  c.lime_perturbations = file.get_uint("explain.lime_perturbations", c.lime_perturbations);
  c.lime_kernel_width = file.get_optional_double("explain.lime_kernel_width", c.lime_kernel_width);
  c.lime_lambda = file.get_double("explain.lime_lambda", c.lime_lambda);
  c.lime_patients = file.get_list("explain.lime_patients");
  if (c.shap_background < 1) throw ConfigError("explain.background must be >= 1");

  c.config_hash = fmt::format("{:016x}", fnv1a64(canonical_config(c)));
  return c;
}

std::string canonical_config(const PipelineConfig& c) {
  const auto& g = c.generator;
  const auto& f = c.forest;
  const auto& l = c.lstm;
  std::string s;
  auto add = [&](std::string_view k, const auto& v) { s += fmt::format("{} = {}\n", k, v); };
  add("paths.lexicon", c.lexicon.generic_string());
  add("paths.triggers", c.triggers.generic_string());
  add("paths.profiles", c.profiles.generic_string());
  add("paths.corpus", c.corpus.generic_string());
  add("generator.seed", g.seed);
  add("generator.ward", g.ward);
  add("generator.planned", g.planned);
  add("generator.unplanned", g.unplanned);
  add("generator.notes_min", g.notes_min);
  add("generator.notes_max", g.notes_max);
  add("generator.window_days", g.window_days);
  add("generator.straggler_fraction", io::num(g.straggler_fraction));
  add("generator.no_window_fraction", io::num(g.no_window_fraction));
  add("generator.negated_rate", io::num(g.negated_rate));
  add("generator.family_rate", io::num(g.family_rate));
  add("generator.suspected_rate", io::num(g.suspected_rate));
  add("generator.out_of_rule_fraction", io::num(g.out_of_rule_fraction));
  add("generator.filler_rate", io::num(g.filler_rate));
  add("generator.male_fraction", io::num(g.male_fraction));
  add("generator.white_fraction", io::num(g.white_fraction));
  add("generator.age_median", g.age_median);
  add("generator.age_sd", io::num(g.age_sd));
  add("generator.first_operation", g.first_operation.iso());
  add("generator.last_operation", g.last_operation.iso());
  add("cohort.window_days", c.window_days);
  add("cohort.min_count", c.min_count);
  add("cohort.ratio_top_n", c.ratio_top_n);
  add("cohort.ratio_alpha", io::num(c.ratio_alpha));
  add("split.seed", c.split_seed);
  add("split.planned_test", opt(c.planned_test));
  add("split.ward_test", opt(c.ward_test));
  add("features.k", c.k_features);
  add("forest.n_trees", f.n_trees);
  add("forest.max_depth", opt(f.max_depth));
  add("forest.min_samples_split", f.min_samples_split);
  add("forest.min_samples_leaf", f.min_samples_leaf);
  add("forest.features_per_split", opt(f.features_per_split));
  add("forest.bootstrap", f.bootstrap);
  add("forest.seed", f.seed);
  add("forest.runs", c.forest_runs);
  add("cv.folds", c.cv_folds);
  add("cv.runs", c.cv_runs);
  add("lstm.epochs", l.epochs);
  add("lstm.hidden_size", l.hidden_size);
  add("lstm.batch_size", l.batch_size);
  add("lstm.num_layers", l.num_layers);
  add("lstm.dropout", io::num(l.dropout));
  add("lstm.learning_rate", io::num(l.learning_rate));
  add("lstm.seed", l.seed);
  add("lstm.precision", l.precision == Precision::High ? "high" : "standard");
  add("lstm.runs", c.lstm_runs);
  add("eval.resamples", c.resamples);
  add("eval.seed", c.eval_seed);
  add("eval.calibration_bins", c.calibration_bins);
  add("explain.background", c.shap_background);
  add("explain.samples", c.shap_samples);
  add("explain.permutations", c.shap_permutations);
  add("explain.seed", c.explain_seed);
  add("explain.lime_perturbations", c.lime_perturbations);
  add("explain.lime_kernel_width",
      c.lime_kernel_width ? io::num(*c.lime_kernel_width) : std::string("auto"));
  add("explain.lime_lambda", io::num(c.lime_lambda));
  std::string patients;
  for (const auto& p : c.lime_patients) patients += (patients.empty() ? "" : ",") + p;
  add("explain.lime_patients", patients);
  return s;
}

std::string lineage(const PipelineConfig& c, std::string_view stage, std::uint64_t seed) {
  return fmt::format("itupred {} config_hash={} seed={}", stage, c.config_hash, seed);
}

fs::path ArtifactPaths::rf_model(std::size_t run) const {
  return root / "rf" / fmt::format("model_run{}.json", run);
}
fs::path ArtifactPaths::lstm_model(std::size_t run) const {
  return root / "lstm" / fmt::format("model_run{}.json", run);
}
fs::path ArtifactPaths::metrics(std::string_view model) const {
  return root / "eval" / fmt::format("metrics_{}.tsv", model);
}
fs::path ArtifactPaths::calibration(std::string_view model) const {
  return root / "eval" / fmt::format("calibration_{}.tsv", model);
}
fs::path ArtifactPaths::parity(std::string_view axis) const {
  return root / "eval" / fmt::format("parity_{}.tsv", axis);
}
fs::path ArtifactPaths::lime(std::string_view patient) const {
  return root / "explain" / fmt::format("lime_{}.tsv", patient);
}

ArtifactPaths artifact_paths(const PipelineConfig& config) { return {config.output_dir}; }

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

void require(const fs::path& p, std::string_view producer) {
  if (!fs::exists(p))
    throw MissingArtifactError(
        fmt::format("missing artifact {} (run '{}' first)", p.string(), producer));
}

fs::path corpus_path(const PipelineConfig& c) {
  return c.corpus.empty() ? artifact_paths(c).corpus() : c.corpus;
}

ConceptLexicon lexicon_of(const PipelineConfig& c) {
  return ConceptLexicon::compile(load_lexicon_entries(c.lexicon));
}

struct Cohort {
  FeatureSet features;
  SplitAssignment split;
  std::vector<std::size_t> train, test;  // indices into features.patients
};

Cohort load_cohort(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  require(paths.features(), "build");
  require(paths.splits(), "build");
  Cohort co;
  co.features = load_feature_table(paths.features());
  co.split = load_splits(paths.splits());
  for (std::size_t i = 0; i < co.features.patients.size(); ++i) {
    const auto& id = co.features.patients[i].patient_id;
    if (co.split.train.count(id)) co.train.push_back(i);
    else if (co.split.test.count(id)) co.test.push_back(i);
  }
  if (co.train.empty() || co.test.empty())
    throw DataError("splits do not match the feature table");
  return co;
}

Eigen::MatrixXd matrix_of(const FeatureSet& fs, const std::vector<std::size_t>& rows) {
  const std::size_t d = fs.vocabulary.size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < d; ++j)
      X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = fs.patients[rows[r]].counts[j];
  return X;
}

std::vector<int> labels_of(const FeatureSet& fs, const std::vector<std::size_t>& rows) {
  std::vector<int> y;
  for (auto i : rows) y.push_back(fs.patients[i].itu() ? 1 : 0);
  return y;
}

// Chi-squared K-best on the training rows; shared by both model stages.
struct Selection {
  FeatureScores scores;
  std::vector<std::size_t> columns;
};

Selection select_features(const PipelineConfig& c, const Cohort& co) {
  Selection s;
  s.scores = chi2_feature_scores(matrix_of(co.features, co.train), labels_of(co.features, co.train));
  if (c.k_features > co.features.vocabulary.size())
    throw DataError(fmt::format("features.k={} exceeds the vocabulary size {}", c.k_features,
                                co.features.vocabulary.size()));
  s.columns = select_k_best(s.scores, c.k_features);
  return s;
}

std::size_t count_models(const std::function<fs::path(std::size_t)>& path_of) {
  std::size_t n = 0;
  while (fs::exists(path_of(n))) ++n;
  return n;
}

std::string percent(double v) { return fmt::format("{:.1f}%", 100.0 * v); }

}  // namespace

// ---------------------------------------------------------------------------
// Stages

StageResult run_gen(const PipelineConfig& c) {
  GeneratorConfig g = c.generator;
  g.profiles = load_profiles(c.profiles);
  validate_generator_config(g);
  const Corpus corpus = generate_corpus(g, lexicon_of(c));
  const auto paths = artifact_paths(c);
  save_corpus(corpus, paths.corpus(), lineage(c, "gen", g.seed));
  std::size_t notes = 0;
  for (const auto& p : corpus.patients) notes += p.notes.size();
  return {{paths.corpus(), gold_path_for(paths.corpus())},
          fmt::format("gen: {} patients, {} notes", corpus.patients.size(), notes)};
}

StageResult run_annotate(const PipelineConfig& c) {
  const auto cp = corpus_path(c);
  require(cp, "gen");
  const Corpus corpus = load_corpus(cp);
  const ConceptLexicon lexicon = lexicon_of(c);
  const ContextRules rules(load_context_rules(c.triggers));
  const AnnotationIndex ann = annotate_corpus(corpus, lexicon, rules);
  const auto paths = artifact_paths(c);
  const std::string head = lineage(c, "annotate", c.generator.seed);
  save_annotations(ann, paths.annotations(), head);
  StageResult result{{paths.annotations()}, ""};
  std::size_t total = 0;
  for (const auto& [id, list] : ann) total += list.size();
  result.summary = fmt::format("annotate: {} mentions", total);

  if (!corpus.gold.empty()) {
    const auto ev = evaluate_against_gold(filter_annotations(ann), filter_annotations(corpus.gold));
    auto out = io::open_output(paths.annotation_eval());
    io::write_header(out, head);
    out << "concept\ttp\tfp\tfn\tprecision\trecall\tf1\n";
    for (const auto& [cid, s] : ev.per_concept)
      out << cid << '\t' << s.true_positive << '\t' << s.false_positive << '\t'
          << s.false_negative << '\t' << fmt::format("{:.4f}", s.precision) << '\t'
          << fmt::format("{:.4f}", s.recall) << '\t' << fmt::format("{:.4f}", s.f1) << '\n';
    out << "micro\t\t\t\t" << fmt::format("{:.4f}", ev.precision) << '\t'
        << fmt::format("{:.4f}", ev.recall) << '\t' << fmt::format("{:.4f}", ev.f1) << '\n';
    out << "macro\t\t\t\t\t\t" << fmt::format("{:.4f}", ev.macro_f1) << '\n';
    if (ev.precision_undefined) out << "# note: no mentions predicted; precision reported as 0\n";
    result.artifacts.push_back(paths.annotation_eval());
    result.summary += fmt::format(", gold F1 {:.4f} (macro {:.4f})", ev.f1, ev.macro_f1);
  }
  return result;
}

StageResult run_build(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  const auto cp = corpus_path(c);
  require(cp, "gen");
  require(paths.annotations(), "annotate");
  const Corpus corpus = load_corpus(cp);
  const AnnotationIndex ann = filter_annotations(load_annotations(paths.annotations()));
  const WindowResult window = window_notes(corpus, c.window_days);
  const FeatureSet features = build_features(window.corpus, ann, c.min_count);
  const auto sequences = build_sequences(window.corpus, ann, features.vocabulary);
  SplitConfig sc;
  sc.seed = c.split_seed;
  sc.planned_test = c.planned_test;
  sc.ward_test = c.ward_test;
  const SplitAssignment split = make_splits(labeled_ids(features.patients), sc);

  save_feature_table(features, paths.features(), lineage(c, "build", c.split_seed));
  save_sequences(sequences, paths.sequences(), lineage(c, "build", c.split_seed));
  save_splits(split, paths.splits(), lineage(c, "build", c.split_seed));
  {
    auto out = io::open_output(paths.window_report());
    io::write_header(out, lineage(c, "build", c.split_seed));
    out << "# dropped_notes " << window.dropped_notes << '\n';
    out << "patient_id\treason\n";
    for (const auto& id : window.dropped_patients) out << id << "\tno notes in window\n";
  }

  std::map<AdmissionClass, std::array<std::size_t, 2>> table;
  for (const auto& p : features.patients) ++table[p.label][split.test.count(p.patient_id)];
  auto cell = [&](AdmissionClass a, int t) { return table[a][static_cast<std::size_t>(t)]; };
  return {{paths.features(), paths.sequences(), paths.splits(), paths.window_report()},
          fmt::format("build: {} patients ({} dropped by window), {} concepts; train "
                      "{}/{}/{} test {}/{}/{} (planned/unplanned/ward)",
                      features.patients.size(), window.dropped_patients.size(),
                      features.vocabulary.size(), cell(AdmissionClass::PlannedITU, 0),
                      cell(AdmissionClass::UnplannedITU, 0), cell(AdmissionClass::Ward, 0),
                      cell(AdmissionClass::PlannedITU, 1), cell(AdmissionClass::UnplannedITU, 1),
                      cell(AdmissionClass::Ward, 1))};
}

StageResult run_stats(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  require(paths.features(), "build");
  const FeatureSet features = load_feature_table(paths.features());
  const RatioReport report = concept_ratio_report(features, c.ratio_top_n, c.ratio_alpha);
  const std::string head = lineage(c, "stats", c.generator.seed);
  save_ratio_table(report.ward_enriched, paths.ratio_ward(), head);
  save_ratio_table(report.itu_enriched, paths.ratio_itu(), head);
  return {{paths.ratio_ward(), paths.ratio_itu()},
          fmt::format("stats: {} ward-enriched, {} ITU-enriched concepts (p < {})",
                      report.ward_enriched.size(), report.itu_enriched.size(), c.ratio_alpha)};
}

StageResult run_train_rf(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  const Cohort co = load_cohort(c);
  const Selection sel = select_features(c, co);
  const Eigen::MatrixXd X_train = matrix_of(co.features, co.train);
  const std::vector<int> y_train = labels_of(co.features, co.train);
  std::vector<std::string> ids, names;
  for (auto i : co.train) ids.push_back(co.features.patients[i].patient_id);
  for (auto j : sel.columns) names.push_back(co.features.vocabulary.id(j));

  StageResult result;
  {
    auto out = io::open_output(paths.feature_scores());
    io::write_header(out, lineage(c, "train-rf", c.split_seed));
    out << "rank\tconcept\tchi2\tselected\n";
    std::vector<std::size_t> order(sel.scores.scores.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[sel.scores.rank[j]] = j;
    for (std::size_t r = 0; r < order.size(); ++r)
      out << r + 1 << '\t' << co.features.vocabulary.id(order[r]) << '\t'
          << fmt::format("{:.6g}", sel.scores.scores[order[r]]) << '\t'
          << (r < c.k_features ? 1 : 0) << '\n';
    result.artifacts.push_back(paths.feature_scores());
  }

  const Eigen::MatrixXd X_sel = select_columns(X_train, sel.columns);
  for (std::size_t run = 0; run < c.forest_runs; ++run) {
    ForestConfig fc = c.forest;
    fc.seed = derive_seed(c.forest.seed, run);
    ForestModel model = fit_forest(X_sel, y_train, fc, ids);
    model.selected_features = sel.columns;
    model.feature_names = names;
    save_forest(model, paths.rf_model(run), lineage(c, "train-rf", fc.seed));
    result.artifacts.push_back(paths.rf_model(run));
  }
  for (std::size_t run = c.forest_runs; fs::exists(paths.rf_model(run)); ++run)
    fs::remove(paths.rf_model(run));

  const auto cv = cross_validate(X_train, y_train, c.forest, c.cv_folds, c.cv_runs, c.k_features);
  {
    auto out = io::open_output(paths.cv_report());
    io::write_header(out, lineage(c, "train-rf", c.forest.seed));
    static constexpr const char* kClass[2] = {"Ward", "ITU"};
    out << "class\tprecision_mean\tprecision_std\trecall_mean\trecall_std\tf1_mean\tf1_std\n";
    for (int k = 0; k < 2; ++k) {
      out << kClass[k];
      for (int m = 0; m < 3; ++m)
        out << '\t' << format_metric(cv.summary[k][m].defined ? Metric(cv.summary[k][m].mean) : Metric(), 4)
            << '\t' << format_metric(cv.summary[k][m].defined ? Metric(cv.summary[k][m].std) : Metric(), 4);
      out << '\n';
    }
    out << "# per-fold rows: run fold class precision recall f1\n";
    for (const auto& f : cv.folds)
      for (int k = 0; k < 2; ++k)
        out << "# " << f.run << ' ' << f.fold << ' ' << kClass[k] << ' ' << io::num(f.values[k][0])
            << ' ' << io::num(f.values[k][1]) << ' ' << io::num(f.values[k][2]) << '\n';
    result.artifacts.push_back(paths.cv_report());
  }
  result.summary = fmt::format("train-rf: {} forests x {} trees on {} rows, k={}; CV ITU F1 {:.3f} +/- {:.3f}",
                               c.forest_runs, c.forest.n_trees, co.train.size(), c.k_features,
                               cv.summary[1][2].mean, cv.summary[1][2].std);
  return result;
}

StageResult run_train_lstm(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  require(paths.sequences(), "build");
  const Cohort co = load_cohort(c);
  const Selection sel = select_features(c, co);
  const auto sequences = load_sequences(paths.sequences());
  std::vector<PatientSequence> train;
  for (const auto& s : sequences)
    if (co.split.train.count(s.patient_id)) train.push_back(s);

  StageResult result;
  double last_loss = 0.0;
  for (std::size_t run = 0; run < c.lstm_runs; ++run) {
    LstmConfig lc = c.lstm;
    lc.seed = derive_seed(c.lstm.seed, run);
    const LstmModel model = train_sequence_model(train, sel.columns, lc);
    if (!model.epoch_loss.empty()) last_loss = model.epoch_loss.back();
    save_lstm(model, paths.lstm_model(run), lineage(c, "train-lstm", lc.seed));
    result.artifacts.push_back(paths.lstm_model(run));
  }
  for (std::size_t run = c.lstm_runs; fs::exists(paths.lstm_model(run)); ++run)
    fs::remove(paths.lstm_model(run));
  result.summary = fmt::format("train-lstm: {} models on {} sequences, final epoch loss {:.4f}",
                               c.lstm_runs, train.size(), last_loss);
  return result;
}

namespace {

// Mean of each metric over runs, skipping runs where it is NA.
ClassMetrics average_metrics(const std::vector<ClassMetrics>& runs) {
  ClassMetrics out;
  for (std::size_t g = 0; g < 4; ++g) {
    Metric* dst[4] = {&out.groups[g].precision, &out.groups[g].recall, &out.groups[g].f1,
                      &out.groups[g].fn_ratio};
    for (std::size_t m = 0; m < 4; ++m) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& r : runs) {
        const Metric* src[4] = {&r.groups[g].precision, &r.groups[g].recall, &r.groups[g].f1,
                                &r.groups[g].fn_ratio};
        if (*src[m]) {
          sum += **src[m];
          ++n;
        }
      }
      if (n > 0) *dst[m] = sum / static_cast<double>(n);
    }
    if (!runs.empty()) out.groups[g].support = runs.front().groups[g].support;
  }
  return out;
}

// Cell-wise mean of per-run bootstrap reports.
MetricsReport average_reports(const std::vector<MetricsReport>& runs) {
  MetricsReport out;
  std::vector<ClassMetrics> points;
  for (const auto& r : runs) points.push_back(r.point);
  out.point = average_metrics(points);
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t m = 0; m < 4; ++m) {
      double s[3] = {0, 0, 0};
      std::size_t n = 0;
      BootstrapCI& dst = out.cells[g][m];
      for (const auto& r : runs) {
        const auto& ci = r.cells[g][m];
        dst.resamples = ci.resamples;
        dst.defined += ci.defined;
        if (!ci.mean) continue;
        s[0] += *ci.mean;
        s[1] += *ci.lower;
        s[2] += *ci.upper;
        ++n;
      }
      if (n == 0) {
        dst.diagnostic = "undefined in every run";
        continue;
      }
      dst.mean = s[0] / static_cast<double>(n);
      dst.lower = s[1] / static_cast<double>(n);
      dst.upper = s[2] / static_cast<double>(n);
    }
  return out;
}

std::vector<double> mean_columns(const std::vector<std::vector<double>>& runs) {
  std::vector<double> out(runs.front().size(), 0.0);
  for (const auto& r : runs)
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  for (auto& v : out) v /= static_cast<double>(runs.size());
  return out;
}

}  // namespace

StageResult run_eval(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  const Cohort co = load_cohort(c);
  require(paths.rf_model(0), "train-rf");
  require(paths.lstm_model(0), "train-lstm");
  require(paths.sequences(), "build");
  const std::size_t rf_runs = count_models([&](std::size_t r) { return paths.rf_model(r); });
  const std::size_t lstm_runs = count_models([&](std::size_t r) { return paths.lstm_model(r); });

  const Eigen::MatrixXd X_test = matrix_of(co.features, co.test);
  std::vector<AdmissionClass> truth;
  std::vector<Demographics> demo;
  std::vector<int> y_test;
  for (auto i : co.test) {
    truth.push_back(co.features.patients[i].label);
    demo.push_back(co.features.patients[i].demographics);
    y_test.push_back(co.features.patients[i].itu() ? 1 : 0);
  }

  std::vector<std::vector<double>> p_rf, p_lstm, p_ens;
  for (std::size_t r = 0; r < rf_runs; ++r) {
    const ForestModel m = load_forest(paths.rf_model(r));
    const Eigen::VectorXd p = predict_proba(m, select_columns(X_test, m.selected_features));
    p_rf.emplace_back(p.data(), p.data() + p.size());
  }
  {
    std::map<std::string, const PatientSequence*> by_id;
    const auto sequences = load_sequences(paths.sequences());
    for (const auto& s : sequences) by_id[s.patient_id] = &s;
    std::vector<PatientSequence> test;
    for (auto i : co.test) {
      auto it = by_id.find(co.features.patients[i].patient_id);
      if (it == by_id.end())
        throw DataError("sequence missing for test patient " + co.features.patients[i].patient_id);
      test.push_back(*it->second);
    }
    for (std::size_t r = 0; r < lstm_runs; ++r)
      p_lstm.push_back(predict_sequences(load_lstm(paths.lstm_model(r)), test));
  }
  for (std::size_t r = 0; r < std::min(rf_runs, lstm_runs); ++r)
    p_ens.push_back(ensemble_average(p_rf[r], p_lstm[r]));

  StageResult result;
  const std::string head = lineage(c, "eval", c.eval_seed);
  struct ModelRuns {
    const char* name;
    const std::vector<std::vector<double>>* probs;
  };
  const ModelRuns models[3] = {{"rf", &p_rf}, {"lstm", &p_lstm}, {"ensemble", &p_ens}};
  std::map<std::string, ClassMetrics> averaged;
  std::vector<ClassMetrics> rf_sub[2][2];  // [axis][side], one entry per run

  auto run_out = io::open_output(paths.run_metrics());
  io::write_header(run_out, head);
  run_out << "model\tgroup\tprecision\trecall\tf1\tfn\truns\n";

  for (const auto& m : models) {
    std::vector<MetricsReport> reports;
    for (std::size_t r = 0; r < m.probs->size(); ++r) {
      const auto pred = threshold_predictions((*m.probs)[r]);
      reports.push_back(metrics_report(truth, pred, c.resamples, derive_seed(c.eval_seed, r)));
      if (std::string_view(m.name) == "rf") {
        for (int axis = 0; axis < 2; ++axis) {
          std::vector<AdmissionClass> t[2];
          std::vector<int> p[2];
          for (std::size_t i = 0; i < truth.size(); ++i) {
            const int side = axis == 0 ? (demo[i].sex == Sex::Male ? 0 : 1)
                                       : (demo[i].ethnicity == Ethnicity::White ? 0 : 1);
            t[side].push_back(truth[i]);
            p[side].push_back(pred[i]);
          }
          for (int side = 0; side < 2; ++side) {
            if (t[side].empty())
              throw DataError(fmt::format("parity: empty {} subgroup", axis == 0 ? "sex" : "ethnicity"));
            rf_sub[axis][side].push_back(classification_metrics(t[side], p[side]));
          }
        }
      }
    }
    const MetricsReport avg = average_reports(reports);
    averaged[m.name] = avg.point;
    save_metrics_table(avg, paths.metrics(m.name), head);
    result.artifacts.push_back(paths.metrics(m.name));
    for (std::size_t g = 0; g < 4; ++g) {
      const auto& gm = avg.point.groups[g];
      run_out << m.name << '\t' << to_string(kReportGroups[g]) << '\t'
              << format_metric(gm.precision, 6) << '\t' << format_metric(gm.recall, 6) << '\t'
              << format_metric(gm.f1, 6) << '\t' << format_metric(gm.fn_ratio, 6) << '\t'
              << m.probs->size() << '\n';
    }

    const auto pbar = mean_columns(*m.probs);
    const auto curve = calibration_curve(y_test, pbar, c.calibration_bins);
    save_calibration(curve, paths.calibration(m.name), head);
    result.artifacts.push_back(paths.calibration(m.name));
  }
  run_out.close();
  result.artifacts.push_back(paths.run_metrics());

  const char* axes[2] = {"sex", "ethnicity"};
  for (int axis = 0; axis < 2; ++axis) {
    const auto report = parity_ratios(average_metrics(rf_sub[axis][0]), average_metrics(rf_sub[axis][1]),
                                      axis == 0 ? "Male" : "White", axis == 0 ? "Female" : "NonWhite");
    save_parity(report, paths.parity(axes[axis]), head);
    result.artifacts.push_back(paths.parity(axes[axis]));
  }

  {
    const auto rf = averaged["rf"];
    std::size_t n_planned = 0, n_unplanned = 0;
    for (auto t : truth) {
      n_planned += t == AdmissionClass::PlannedITU;
      n_unplanned += t == AdmissionClass::UnplannedITU;
    }
    auto out = io::open_output(paths.missed_unplanned());
    io::write_header(out, head);
    out << "n_unplanned\tn_planned\tfn_unplanned\tbaseline\tresidual\n";
    if (rf[ReportGroup::Unplanned].fn_ratio && n_unplanned + n_planned > 0) {
      const auto m = missed_unplanned_reduction(n_unplanned, n_planned, *rf[ReportGroup::Unplanned].fn_ratio);
      out << n_unplanned << '\t' << n_planned << '\t'
          << fmt::format("{:.4f}", *rf[ReportGroup::Unplanned].fn_ratio) << '\t'
          << fmt::format("{:.4f}", m.baseline) << '\t' << fmt::format("{:.4f}", m.residual) << '\n';
      result.summary = fmt::format("; missed ITU share {} -> {}", percent(m.baseline), percent(m.residual));
    } else {
      out << n_unplanned << '\t' << n_planned << "\tNA\tNA\tNA\n";
    }
    result.artifacts.push_back(paths.missed_unplanned());
  }

  {
    auto out = io::open_output(paths.predictions());
    io::write_header(out, head);
    out << "patient_id\tlabel\tsex\tethnicity\tp_rf\tp_lstm\tp_ensemble\n";
    const auto a = mean_columns(p_rf), b = mean_columns(p_lstm);
    const auto e = p_ens.empty() ? std::vector<double>(a.size(), std::nan("")) : mean_columns(p_ens);
    for (std::size_t k = 0; k < co.test.size(); ++k) {
      const auto& p = co.features.patients[co.test[k]];
      out << p.patient_id << '\t' << to_string(p.label) << '\t' << to_string(p.demographics.sex)
          << '\t' << to_string(p.demographics.ethnicity) << '\t' << fmt::format("{:.6f}", a[k])
          << '\t' << fmt::format("{:.6f}", b[k]) << '\t' << fmt::format("{:.6f}", e[k]) << '\n';
    }
    result.artifacts.push_back(paths.predictions());
  }

  const auto& rf = averaged["rf"];
  const auto& ls = averaged["lstm"];
  result.summary = fmt::format("eval: RF ITU P/R/F1 {}/{}/{}, LSTM ITU F1 {}", format_metric(rf[ReportGroup::ITU].precision),
                               format_metric(rf[ReportGroup::ITU].recall), format_metric(rf[ReportGroup::ITU].f1),
                               format_metric(ls[ReportGroup::ITU].f1)) +
                   result.summary;
  return result;
}

StageResult run_explain(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  const Cohort co = load_cohort(c);
  require(paths.rf_model(0), "train-rf");
  const ForestModel model = load_forest(paths.rf_model(0));
  const BatchModel f = as_batch_model(model);
  const Eigen::MatrixXd X_train = select_columns(matrix_of(co.features, co.train), model.selected_features);
  const Eigen::MatrixXd X_test = select_columns(matrix_of(co.features, co.test), model.selected_features);
  const Eigen::MatrixXd background = sample_background(X_train, c.shap_background, c.explain_seed);
  const std::string head = lineage(c, "explain", c.explain_seed);

  // SHAP over a seeded subset of the test set, kept in id order.
  std::vector<std::size_t> chosen(co.test.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  if (chosen.size() > c.shap_samples) {
    Rng rng = make_rng(c.explain_seed, 1);
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(c.shap_samples);
    std::sort(chosen.begin(), chosen.end());
  }
  StageResult result;
  std::vector<ShapleyAttribution> attributions;
  std::vector<std::string> sample_ids;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(chosen.size()), X_test.cols());
  const bool exact = static_cast<std::size_t>(X_test.cols()) <= kMaxExactFeatures;
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    const Eigen::VectorXd x = X_test.row(static_cast<Eigen::Index>(chosen[k])).transpose();
    ShapleyConfig sc;
    sc.method = exact ? ShapleyMethod::Exact : ShapleyMethod::Sampled;
    sc.permutations = c.shap_permutations;
    sc.seed = derive_seed(c.explain_seed, 100 + chosen[k]);
    attributions.push_back(shapley_values(f, x, background, sc));
    values.row(static_cast<Eigen::Index>(k)) = x.transpose();
    sample_ids.push_back(co.features.patients[co.test[chosen[k]]].patient_id);
  }
  if (!attributions.empty()) {
    const auto summary = global_summary(attributions, values);
    save_shap_summary(summary, model.feature_names, paths.shap_summary(), head);
    save_shap_points(summary, sample_ids, model.feature_names, paths.shap_points(), head);
    result.artifacts.push_back(paths.shap_summary());
    result.artifacts.push_back(paths.shap_points());
  }

  // LIME for the requested patients, or the first correctly flagged
  // unplanned admission.
  std::vector<std::size_t> lime_rows;
  std::map<std::string, std::size_t> test_row;
  for (std::size_t k = 0; k < co.test.size(); ++k) test_row[co.features.patients[co.test[k]].patient_id] = k;
  for (const auto& id : c.lime_patients) {
    auto it = test_row.find(id);
    if (it == test_row.end()) throw DataError(fmt::format("explain.lime_patients: {} is not in the test set", id));
    lime_rows.push_back(it->second);
  }
  if (c.lime_patients.empty()) {
    const Eigen::VectorXd p = predict_proba(model, X_test);
    for (std::size_t k = 0; k < co.test.size(); ++k)
      if (co.features.patients[co.test[k]].label == AdmissionClass::UnplannedITU &&
          predict_positive(p[static_cast<Eigen::Index>(k)])) {
        lime_rows.push_back(k);
        break;
      }
  }
  for (std::size_t k : lime_rows) {
    const Eigen::VectorXd x = X_test.row(static_cast<Eigen::Index>(k)).transpose();
    LimeConfig lc;
    lc.n_perturbations = std::max<std::size_t>(c.lime_perturbations, static_cast<std::size_t>(x.size()) + 2);
    lc.kernel_width = c.lime_kernel_width;
    lc.ridge_lambda = c.lime_lambda;
    lc.seed = derive_seed(c.explain_seed, 100000 + k);
    const auto e = lime_explain(f, x, lc);
    const auto& id = co.features.patients[co.test[k]].patient_id;
    save_lime(e, x, model.feature_names, id, paths.lime(id), head);
    result.artifacts.push_back(paths.lime(id));
  }
  result.summary = fmt::format("explain: Shapley for {} test patients ({}), LIME for {}", attributions.size(),
                               exact ? "exact" : fmt::format("{} permutations", c.shap_permutations),
                               lime_rows.size());
  return result;
}

namespace {

std::vector<std::vector<std::string>> read_table(const fs::path& path, std::string_view producer) {
  require(path, producer);
  std::vector<std::vector<std::string>> rows;
  bool header = true;
  io::for_each_line(path, [&](std::size_t, const std::string& line) {
    if (header) {
      header = false;
      return;
    }
    rows.push_back(io::split(line, '\t'));
  });
  return rows;
}

double cell(const std::vector<std::string>& row, std::size_t i, const fs::path& path) {
  if (i >= row.size()) throw ParseError(path.string(), 0, std::to_string(i), "missing column");
  return io::parse_double(row[i], path.string(), 0, std::to_string(i));
}

}  // namespace

StageResult run_report(const PipelineConfig& c) {
  const auto paths = artifact_paths(c);
  const fs::path dir = paths.report_dir();
  const std::string head = lineage(c, "report", c.explain_seed);
  StageResult result;

  {
    std::vector<BarItem> bars;
    const auto scores = paths.feature_scores();
    for (const auto& row : read_table(scores, "train-rf"))
      if (row.size() >= 4 && row[3] == "1") bars.push_back({row[1], cell(row, 2, scores)});
    write_svg(dir / "chi2_top_features.svg",
              bar_chart_svg(fmt::format("Top {} concepts by chi-squared score", bars.size()),
                            "Chi-squared score", bars),
              head);
    result.artifacts.push_back(dir / "chi2_top_features.svg");
  }
  {
    const std::pair<const char*, const char*> series[3] = {
        {"ensemble", "#1f77b4"}, {"lstm", "#ff7f0e"}, {"rf", "#2ca02c"}};
    std::vector<CurveSeries> curves;
    for (const auto& [name, color] : series) {
      CurveSeries cs{name == std::string("rf") ? "RF" : name == std::string("lstm") ? "LSTM" : "Ensemble",
                     color, {}};
      const auto path = paths.calibration(name);
      for (const auto& row : read_table(path, "eval"))
        cs.points.emplace_back(cell(row, 1, path), cell(row, 2, path));
      curves.push_back(std::move(cs));
    }
    write_svg(dir / "calibration.svg", calibration_svg("Calibration curves", curves), head);
    result.artifacts.push_back(dir / "calibration.svg");
  }
  {
    std::vector<BeeswarmRow> rows;
    std::map<std::string, std::size_t> index;
    for (const auto& row : read_table(paths.shap_summary(), "explain")) {
      index[row.at(1)] = rows.size();
      rows.push_back({row.at(1), {}, {}});
    }
    const auto pts = paths.shap_points();
    for (const auto& row : read_table(pts, "explain")) {
      auto it = index.find(row.at(1));
      if (it == index.end()) continue;
      rows[it->second].value.push_back(cell(row, 2, pts));
      rows[it->second].phi.push_back(cell(row, 3, pts));
    }
    write_svg(dir / "shap_summary.svg", beeswarm_svg("Shapley value summary (RF)", rows), head);
    result.artifacts.push_back(dir / "shap_summary.svg");
  }
  {
    std::vector<fs::path> lime_files;
    if (fs::exists(paths.root / "explain"))
      for (const auto& entry : fs::directory_iterator(paths.root / "explain")) {
        const auto name = entry.path().filename().string();
        if (name.rfind("lime_", 0) == 0 && entry.path().extension() == ".tsv")
          lime_files.push_back(entry.path());
      }
    std::sort(lime_files.begin(), lime_files.end());
    for (const auto& file : lime_files) {
      std::vector<BarItem> bars;
      for (const auto& row : read_table(file, "explain")) {
        const double score = cell(row, 2, file);
        if (bars.size() < 10 && score != 0.0) bars.push_back({row.at(0), score});
      }
      const std::string id = file.stem().string().substr(5);
      const auto out = dir / fmt::format("lime_{}.svg", id);
      write_svg(out, bar_chart_svg(fmt::format("LIME explanation for {}", id), "Concept importance", bars),
                head);
      result.artifacts.push_back(out);
    }
  }
  result.summary = fmt::format("report: {} plots in {}", result.artifacts.size(), dir.string());
  return result;
}

std::vector<StageResult> run_all(const PipelineConfig& c) {
  std::vector<StageResult> out;
  if (c.corpus.empty()) out.push_back(run_gen(c));
  out.push_back(run_annotate(c));
  out.push_back(run_build(c));
  out.push_back(run_stats(c));
  out.push_back(run_train_rf(c));
  out.push_back(run_train_lstm(c));
  out.push_back(run_eval(c));
  out.push_back(run_explain(c));
  out.push_back(run_report(c));
  return out;
}

std::vector<RunAveragedMetrics> load_run_metrics(const fs::path& path) {
  std::vector<RunAveragedMetrics> out;
  for (const auto& row : read_table(path, "eval")) {
    if (row.size() < 6) throw ParseError(path.string(), 0, "row", "expected 7 columns");
    RunAveragedMetrics m{row[0], row[1], {}};
    for (int k = 0; k < 4; ++k) m.values[k] = cell(row, 2 + static_cast<std::size_t>(k), path);
    out.push_back(m);
  }
  return out;
}

}  // namespace itupred
