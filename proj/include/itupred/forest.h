#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "itupred/decision.h"

namespace itupred {

// ---------------------------------------------------------------------------
// K-best selection

struct FeatureScores {
  std::vector<double> scores;
  /// rank[j] = 0 for the best feature.
  std::vector<std::size_t> rank;
  std::size_t selected_k = 0;
};

/// Chi-squared score per column of a non-negative count matrix against a
/// binary target: O_cj = sum of column j over class c, E_cj = total_j * N_c/N.
/// Zero-total columns score 0. Throws DataError on negative entries, a size
/// mismatch or single-class y.
FeatureScores chi2_feature_scores(const Eigen::MatrixXd& X,
                                  const std::vector<int>& y);

/// Indices of the k highest scores, ordered by rank (ties by column index).
/// Sets scores.selected_k. Throws DataError when k > d or k == 0.
std::vector<std::size_t> select_k_best(FeatureScores& scores, std::size_t k = 20);

/// Copies the given columns in order.
Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X,
                               const std::vector<std::size_t>& columns);

// ---------------------------------------------------------------------------
// Random forest

struct ForestConfig {
  std::size_t n_trees = 300;
  std::optional<std::size_t> max_depth;  // unbounded
  std::size_t min_samples_split = 2;
  std::size_t min_samples_leaf = 1;
  /// Defaults to ceil(sqrt(d)).
  std::optional<std::size_t> features_per_split;
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

/// Throws ConfigError when a field is out of range for `n_features`.
void validate_forest_config(const ForestConfig& config, std::size_t n_features);

/// Flat node arrays. feature[i] < 0 marks a leaf; samples with
/// x[feature] <= threshold go left.
struct DecisionTree {
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left;
  std::vector<int> right;
  /// Positive-class probability at each node (leaf distribution is
  /// {1 - value, value}).
  std::vector<double> value;

  std::size_t size() const { return feature.size(); }
  double predict(const double* row, std::ptrdiff_t stride) const;
};

struct ForestModel {
  ForestConfig config;
  std::size_t n_features = 0;
  /// Column indices into the full vocabulary and their concept ids. Empty
  /// when the model was fitted on an unselected matrix.
  std::vector<std::size_t> selected_features;
  std::vector<std::string> feature_names;
  /// Training-set column means (explanation baselines).
  std::vector<double> feature_means;
  std::vector<DecisionTree> trees;
};

/// Fits a forest. When `row_ids` is non-empty rows are first put in id order,
/// so the fitted model does not depend on the input row order.
/// Throws DataError on fewer than 2 rows, size mismatch or single-class y.
ForestModel fit_forest(const Eigen::MatrixXd& X, const std::vector<int>& y,
                       const ForestConfig& config,
                       std::span<const std::string> row_ids = {});

/// Mean positive-class leaf probability over trees. Throws DataError on a
/// dimension mismatch.
double predict_proba(const ForestModel& model, std::span<const double> x);
Eigen::VectorXd predict_proba(const ForestModel& model, const Eigen::MatrixXd& X);

/// The returned callable refers to `model`, which must outlive it.
BatchModel as_batch_model(const ForestModel& model);

/// Gini impurity 1 - p^2 - (1-p)^2 of a node with `positives` of `n`.
double gini_impurity(double positives, double n);

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldMetrics {
  std::size_t run = 0;
  std::size_t fold = 0;
  /// Indexed [class][metric]: class 0 = Ward, 1 = ITU; metric 0..2 =
  /// precision, recall, F1. NaN when undefined.
  double values[2][3] = {};
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over folds
  std::size_t defined = 0;
};

struct CrossValidationReport {
  std::vector<FoldMetrics> folds;
  MetricSummary summary[2][3];
};

/// Stratified k-fold CV. Each run reshuffles fold assignment with a seed
/// derived from (config.seed, run). `k_best` > 0 selects that many features
/// on each training fold. Throws DataError naming the fold when a training or
/// validation fold is single-class, and ConfigError when k_folds < 2.
CrossValidationReport cross_validate(const Eigen::MatrixXd& X,
                                     const std::vector<int>& y,
                                     const ForestConfig& config,
                                     std::size_t k_folds = 5,
                                     std::size_t runs = 1,
                                     std::size_t k_best = 0);

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kForestFormatVersion = 1;

void save_forest(const ForestModel& model, const std::filesystem::path& path,
                 std::string_view lineage = {});
/// Throws ParseError on malformed files and on unknown format versions.
ForestModel load_forest(const std::filesystem::path& path);

}  // namespace itupred
