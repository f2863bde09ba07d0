#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itupred/corpus.h"
#include "itupred/decision.h"

namespace itupred {

using Metric = std::optional<double>;  // nullopt = NA

// ---------------------------------------------------------------------------
// Metrics

struct BinaryMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  Metric precision;  // NA when nothing is predicted positive
  Metric recall;     // NA when there are no positives
  Metric f1;         // NA when precision or recall is NA
};

/// Metrics with `positive` (0 or 1) as the positive class.
BinaryMetrics binary_metrics(std::span<const int> y_true, std::span<const int> y_pred,
                             int positive = 1);

/// Harmonic mean; 0 when both are 0, NA when either is NA.
Metric f1_score(Metric precision, Metric recall);

enum class ReportGroup { Ward, ITU, Planned, Unplanned };
inline constexpr std::array<ReportGroup, 4> kReportGroups{
    ReportGroup::Ward, ReportGroup::ITU, ReportGroup::Planned, ReportGroup::Unplanned};
std::string_view to_string(ReportGroup g);

struct GroupMetrics {
  Metric precision, recall, f1;
  /// 1 - recall for the ITU groups; NA for Ward.
  Metric fn_ratio;
  std::size_t support = 0;
};

struct ClassMetrics {
  std::array<GroupMetrics, 4> groups;
  const GroupMetrics& operator[](ReportGroup g) const {
    return groups[static_cast<std::size_t>(g)];
  }
};

/// Ward metrics treat Ward as the positive class; ITU metrics use the binary
/// target. Planned/Unplanned recall and FN are computed over that subtype's
/// patients. Subtype precision is 1.0 when any patient of the subtype is
/// predicted positive (every such prediction is a true ITU positive), NA
/// otherwise. Throws DataError on length mismatch.
ClassMetrics classification_metrics(std::span<const AdmissionClass> truth,
                                    std::span<const int> predicted_itu);

std::vector<int> threshold_predictions(std::span<const double> p);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapCI {
  Metric mean, lower, upper;  // 2.5th / 97.5th percentiles
  std::size_t resamples = 0;
  std::size_t defined = 0;  // resamples where the metric was not NA
  std::uint64_t seed = 0;
  std::string diagnostic;   // set when the interval is NA
};

/// Evaluates a metric on an index multiset drawn from [0, n).
using IndexMetric = std::function<Metric(std::span<const std::size_t>)>;
/// Several metrics evaluated on the same resample.
using IndexMetrics = std::function<std::vector<Metric>(std::span<const std::size_t>)>;

/// Percentile bootstrap (linear interpolation between order statistics).
/// Resample r draws n indices with a stream seeded by (seed, r). When more
/// than half of the resamples give NA the interval is NA with a diagnostic.
/// Throws DataError when n == 0 or resamples == 0.
BootstrapCI bootstrap_ci(const IndexMetric& metric, std::size_t n,
                         std::size_t resamples = 1000, std::uint64_t seed = 0);
std::vector<BootstrapCI> bootstrap_many(const IndexMetrics& metrics, std::size_t n,
                                        std::size_t resamples = 1000,
                                        std::uint64_t seed = 0);

/// Linear-interpolation percentile of a non-empty sample, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Table-3 shaped report: mean and CI for precision/recall/F1/FN per group.
struct MetricsReport {
  std::array<std::array<BootstrapCI, 4>, 4> cells;  // [group][metric]
  ClassMetrics point;
};

MetricsReport metrics_report(std::span<const AdmissionClass> truth,
                             std::span<const int> predicted_itu,
                             std::size_t resamples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBin {
  std::size_t index = 0;
  double mean_predicted = 0.0;
  double observed_rate = 0.0;
  std::size_t count = 0;
};

struct CalibrationCurve {
  std::size_t n_bins = 10;
  std::vector<CalibrationBin> bins;  // empty bins omitted
};

/// Equal-width bins over [0,1]; p lands in bin min(floor(p * n_bins),
/// n_bins - 1), so the last bin is right-closed. Throws DataError when a
/// probability is outside [0,1], lengths differ or n_bins == 0.
CalibrationCurve calibration_curve(std::span<const int> y_true,
                                   std::span<const double> p_pred,
                                   std::size_t n_bins = 10);

// ---------------------------------------------------------------------------
// Parity

struct ParityCell {
  Metric a, b;
  Metric ratio;  // a / b, NA when either side is NA or b == 0
};

struct ParityReport {
  std::string label_a, label_b;
  /// Rows Ward and ITU; columns precision, recall, F1, FN ratio.
  std::array<std::array<ParityCell, 4>, 2> cells;
};

ParityReport parity_ratios(const ClassMetrics& a, const ClassMetrics& b,
                           std::string label_a, std::string label_b);

enum class ParityAxis { Sex, Ethnicity };

/// Splits the predictions by demographic (Male/Female or White/NonWhite) and
/// computes parity ratios. Throws DataError when a subgroup is empty.
ParityReport parity_by(ParityAxis axis, std::span<const AdmissionClass> truth,
                       std::span<const int> predicted_itu,
                       std::span<const Demographics> demographics);

// ---------------------------------------------------------------------------
// Ensemble and missed-unplanned arithmetic

/// Element-wise mean. Throws DataError on length mismatch.
std::vector<double> ensemble_average(std::span<const double> a, std::span<const double> b);

struct MissedUnplanned {
  double baseline = 0.0;  // n_unplanned / (n_unplanned + n_planned)
  double residual = 0.0;  // baseline * fn_unplanned
};

/// Throws DataError when there are no ITU cases or fn is outside [0,1].
MissedUnplanned missed_unplanned_reduction(std::size_t n_unplanned, std::size_t n_planned,
                                           double fn_unplanned);

// ---------------------------------------------------------------------------
// Exports

std::string format_metric(const Metric& m, int digits = 2);

/// Rows per group; columns <metric>_mean/_lower/_upper for precision, recall,
/// f1 and fn. Ends with a footer comment on the subtype precision convention.
void save_metrics_table(const MetricsReport& report, const std::filesystem::path& path,
                        std::string_view header = {});
void save_calibration(const CalibrationCurve& curve, const std::filesystem::path& path,
                      std::string_view header = {});
void save_parity(const ParityReport& report, const std::filesystem::path& path,
                 std::string_view header = {});

}  // namespace itupred
