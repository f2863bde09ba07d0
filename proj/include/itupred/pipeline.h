#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "itupred/config.h"
#include "itupred/forest.h"
#include "itupred/generator.h"
#include "itupred/seqmodel.h"

namespace itupred {

struct PipelineConfig {
  // Inputs, resolved against the config file's directory.
  std::filesystem::path lexicon;
  std::filesystem::path triggers;
  std::filesystem::path profiles;
  /// External corpus; empty means the `gen` output.
  std::filesystem::path corpus;
  /// Output root, resolved against the working directory.
  std::filesystem::path output_dir = "out";

  GeneratorConfig generator;  // profiles are loaded lazily by `gen`

  int window_days = 30;
  std::size_t min_count = 2;
  std::size_t ratio_top_n = 50;
  double ratio_alpha = 0.05;

  std::uint64_t split_seed = 7;
  std::optional<std::size_t> planned_test = 135;
  /// Unset means a 1:1 balanced test set.
  std::optional<std::size_t> ward_test;

  std::size_t k_features = 20;

  ForestConfig forest;
  std::size_t forest_runs = 5;
  std::size_t cv_folds = 5;
  std::size_t cv_runs = 1;

  LstmConfig lstm;
  std::size_t lstm_runs = 5;

  std::size_t resamples = 1000;
  std::uint64_t eval_seed = 7;
  std::size_t calibration_bins = 10;

  std::size_t shap_background = 100;
  std::size_t shap_samples = 100;
  std::size_t shap_permutations = 200;
  std::uint64_t explain_seed = 7;
  std::size_t lime_perturbations = 5000;
  std::optional<double> lime_kernel_width;
  double lime_lambda = 1.0;
  /// Patients to explain with LIME; empty means the first correctly
  /// predicted unplanned ITU patient.
  std::vector<std::string> lime_patients;

  /// Hex FNV-1a of the canonical key=value dump of the effective config.
  std::string config_hash;
};

/// Builds a typed config. Unknown keys raise ConfigError. `output_override`
/// (e.g. from ITUPRED_OUTPUT_DIR or a flag) replaces output.dir.
PipelineConfig make_pipeline_config(const ConfigFile& file,
                                    const std::optional<std::filesystem::path>& output_override);

/// Canonical "section.key = value" listing of every setting in effect.
std::string canonical_config(const PipelineConfig& config);

/// Header text embedded in every artifact.
std::string lineage(const PipelineConfig& config, std::string_view stage, std::uint64_t seed);

/// Artifact locations under the output directory.
struct ArtifactPaths {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "corpus.jsonl"; }
  std::filesystem::path annotations() const { return root / "annotations.jsonl"; }
  std::filesystem::path annotation_eval() const { return root / "annotation_eval.tsv"; }
  std::filesystem::path window_report() const { return root / "window_report.tsv"; }
  std::filesystem::path features() const { return root / "features.tsv"; }
  std::filesystem::path sequences() const { return root / "sequences.jsonl"; }
  std::filesystem::path splits() const { return root / "splits.tsv"; }
  std::filesystem::path ratio_ward() const { return root / "stats" / "ratio_ward_enriched.tsv"; }
  std::filesystem::path ratio_itu() const { return root / "stats" / "ratio_itu_enriched.tsv"; }
  std::filesystem::path feature_scores() const { return root / "rf" / "feature_scores.tsv"; }
  std::filesystem::path cv_report() const { return root / "rf" / "cv.tsv"; }
  std::filesystem::path rf_model(std::size_t run) const;
  std::filesystem::path lstm_model(std::size_t run) const;
  std::filesystem::path predictions() const { return root / "eval" / "predictions.tsv"; }
  std::filesystem::path metrics(std::string_view model) const;
  std::filesystem::path run_metrics() const { return root / "eval" / "run_metrics.tsv"; }
  std::filesystem::path calibration(std::string_view model) const;
  std::filesystem::path parity(std::string_view axis) const;
  std::filesystem::path missed_unplanned() const { return root / "eval" / "missed_unplanned.tsv"; }
  std::filesystem::path shap_summary() const { return root / "explain" / "shap_summary.tsv"; }
  std::filesystem::path shap_points() const { return root / "explain" / "shap_points.tsv"; }
  std::filesystem::path lime(std::string_view patient) const;
  std::filesystem::path report_dir() const { return root / "report"; }
};

ArtifactPaths artifact_paths(const PipelineConfig& config);

struct StageResult {
  std::vector<std::filesystem::path> artifacts;
  std::string summary;  // one line for the console
};

StageResult run_gen(const PipelineConfig& config);
StageResult run_annotate(const PipelineConfig& config);
StageResult run_build(const PipelineConfig& config);
StageResult run_stats(const PipelineConfig& config);
StageResult run_train_rf(const PipelineConfig& config);
StageResult run_train_lstm(const PipelineConfig& config);
StageResult run_eval(const PipelineConfig& config);
StageResult run_explain(const PipelineConfig& config);
StageResult run_report(const PipelineConfig& config);

/// All stages in order.
std::vector<StageResult> run_all(const PipelineConfig& config);

/// Mean over runs of the per-run point metrics, as written to
/// run_metrics.tsv: model -> group -> {precision, recall, f1, fn}.
struct RunAveragedMetrics {
  std::string model;
  std::string group;
  double values[4];  // NaN when undefined in every run
};
std::vector<RunAveragedMetrics> load_run_metrics(const std::filesystem::path& path);

}  // namespace itupred
