#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "itupred/decision.h"

namespace itupred {

// ---------------------------------------------------------------------------
// Shapley values

enum class ShapleyMethod { Exact, Sampled };

inline constexpr std::size_t kMaxExactFeatures = 12;

struct ShapleyConfig {
  ShapleyMethod method = ShapleyMethod::Sampled;
  /// Sampled mode: number of permutations (rounded up to an even count;
  /// permutations come in antithetic pairs).
  std::size_t permutations = 2000;
  std::uint64_t seed = 0;
};

struct ShapleyAttribution {
  Eigen::VectorXd phi;
  double baseline = 0.0;    // mean model output over the background
  double prediction = 0.0;  // f(x)
  ShapleyMethod method = ShapleyMethod::Exact;
  std::size_t permutations = 0;
  std::uint64_t seed = 0;
};

/// Up to `cap` rows of `X` chosen by a seeded shuffle, kept in original order.
Eigen::MatrixXd sample_background(const Eigen::MatrixXd& X, std::size_t cap = 100,
                                  std::uint64_t seed = 0);

/// v(S) = mean over background rows b of f(x on S, b elsewhere).
/// Exact enumerates all 2^d coalitions (d <= 12). Sampled averages marginal
/// contributions over permutation pairs (pi, reversed pi); each pair is
/// evaluated against one background row, cycling through a seeded shuffle of
/// the background so rows are used equally often.
/// Throws DataError on an empty background or width mismatch, ConfigError
/// for Exact with d > 12.
ShapleyAttribution shapley_values(const BatchModel& model, const Eigen::VectorXd& x,
                                  const Eigen::MatrixXd& background,
                                  const ShapleyConfig& config);

struct GlobalShapSummary {
  std::vector<std::size_t> ranking;  // features by mean |phi| descending
  Eigen::VectorXd mean_abs;
  Eigen::MatrixXd phi;     // samples x features
  Eigen::MatrixXd values;  // samples x features
};

/// Throws DataError when empty or when shapes disagree. Ties keep feature
/// order.
GlobalShapSummary global_summary(const std::vector<ShapleyAttribution>& attributions,
                                 const Eigen::MatrixXd& feature_values);

// ---------------------------------------------------------------------------
// LIME

struct LimeConfig {
  std::size_t n_perturbations = 5000;
  /// Defaults to 0.75 * sqrt(K).
  std::optional<double> kernel_width;
  double ridge_lambda = 1.0;
  std::uint64_t seed = 0;
  /// Use every z in {0,1}^K instead of sampling (K <= 20).
  bool exhaustive = false;
};

struct LimeExplanation {
  Eigen::VectorXd coefficients;
  Eigen::VectorXd importance;  // |coefficient|
  double intercept = 0.0;
  double r2 = 0.0;             // weighted; NaN when degenerate
  double kernel_width = 0.0;
  std::size_t n_perturbations = 0;
  std::uint64_t seed = 0;
  double prediction = 0.0;
  /// All perturbations gave the same prediction; coefficients are zero.
  bool degenerate = false;
};

/// Interpretable representation z in {0,1}^K (1 keeps x_j, 0 zeroes it).
/// Samples are weighted by exp(-D^2 / sigma^2) with D the fraction of zeros
/// in z; a ridge regression with unpenalized intercept is fitted to f.
/// The first sampled z is all ones. Throws ConfigError when
/// n_perturbations < K + 2 or the settings are invalid.
LimeExplanation lime_explain(const BatchModel& model, const Eigen::VectorXd& x,
                             const LimeConfig& config);

/// Weighted ridge regression with an unpenalized intercept, as used by
/// lime_explain. Returns (coefficients, intercept).
std::pair<Eigen::VectorXd, double> weighted_ridge(const Eigen::MatrixXd& Z,
                                                  const Eigen::VectorXd& y,
                                                  const Eigen::VectorXd& w, double lambda);

// ---------------------------------------------------------------------------
// Exports

/// Columns: rank, feature, mean_abs_phi.
void save_shap_summary(const GlobalShapSummary& summary,
                       const std::vector<std::string>& feature_names,
                       const std::filesystem::path& path, std::string_view header = {});

/// Columns: sample, feature, value, phi (one row per sample and feature).
void save_shap_points(const GlobalShapSummary& summary,
                      const std::vector<std::string>& sample_ids,
                      const std::vector<std::string>& feature_names,
                      const std::filesystem::path& path, std::string_view header = {});

/// Columns: feature, value, score, direction (ITU for positive scores),
/// sorted by |score| descending. Trailing comment lines carry fidelity.
void save_lime(const LimeExplanation& explanation, const Eigen::VectorXd& x,
               const std::vector<std::string>& feature_names, std::string_view sample_id,
               const std::filesystem::path& path, std::string_view header = {});

}  // namespace itupred
