#include "itupred/eval.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "itupred/error.h"
#include "itupred/io.h"
#include "itupred/rng.h"

namespace itupred {

namespace {

Metric ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

template <typename A, typename B>
void require_same_length(const A& a, const B& b, std::string_view what) {
  if (a.size() != b.size())
    throw DataError(fmt::format("{}: length mismatch ({} vs {})", what, a.size(), b.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

Metric f1_score(Metric precision, Metric recall) {
  if (!precision || !recall) return std::nullopt;
  const double s = *precision + *recall;
  if (s == 0.0) return 0.0;
  return 2.0 * *precision * *recall / s;
}

BinaryMetrics binary_metrics(std::span<const int> y_true, std::span<const int> y_pred,
                             int positive) {
  require_same_length(y_true, y_pred, "binary_metrics");
  BinaryMetrics m;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const bool t = y_true[i] == positive, p = y_pred[i] == positive;
    if (t && p) ++m.tp;
    else if (!t && p) ++m.fp;
    else if (t && !p) ++m.fn;
    else ++m.tn;
  }
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

std::string_view to_string(ReportGroup g) {
  switch (g) {
    case ReportGroup::Ward: return "Ward";
    case ReportGroup::ITU: return "ITU";
    case ReportGroup::Planned: return "Planned";
    case ReportGroup::Unplanned: return "Unplanned";
  }
  return "?";
}

namespace {

// Core routine shared by the point estimate and the bootstrap: `index`
// selects (with repetition) which rows participate.
template <typename IndexRange>
ClassMetrics metrics_over(std::span<const AdmissionClass> truth, std::span<const int> pred,
                          const IndexRange& index) {
  std::size_t itu_tp = 0, itu_fp = 0, itu_fn = 0, ward_tp = 0, ward_fp = 0, ward_fn = 0;
  std::size_t sub_n[2] = {0, 0}, sub_hit[2] = {0, 0};
  for (std::size_t i : index) {
    const bool pos = is_itu(truth[i]);
    const bool hit = pred[i] != 0;
    if (pos && hit) ++itu_tp;
    if (!pos && hit) ++itu_fp;
    if (pos && !hit) ++itu_fn;
    if (!pos && !hit) ++ward_tp;
    if (pos && !hit) ++ward_fp;
    if (!pos && hit) ++ward_fn;
    if (pos) {
      const int s = truth[i] == AdmissionClass::PlannedITU ? 0 : 1;
      ++sub_n[s];
      if (hit) ++sub_hit[s];
    }
  }
  ClassMetrics out;
  auto& ward = out.groups[0];
  ward.precision = ratio(ward_tp, ward_tp + ward_fp);
  ward.recall = ratio(ward_tp, ward_tp + ward_fn);
  ward.f1 = f1_score(ward.precision, ward.recall);
  ward.support = ward_tp + ward_fn;

  auto& itu = out.groups[1];
  itu.precision = ratio(itu_tp, itu_tp + itu_fp);
  itu.recall = ratio(itu_tp, itu_tp + itu_fn);
  itu.f1 = f1_score(itu.precision, itu.recall);
  if (itu.recall) itu.fn_ratio = 1.0 - *itu.recall;
  itu.support = itu_tp + itu_fn;

  for (int s = 0; s < 2; ++s) {
    auto& g = out.groups[2 + s];
    g.support = sub_n[s];
    g.recall = ratio(sub_hit[s], sub_n[s]);
    if (sub_hit[s] > 0) g.precision = 1.0;
    g.f1 = f1_score(g.precision, g.recall);
    if (g.recall) g.fn_ratio = 1.0 - *g.recall;
  }
  return out;
}

struct IotaRange {
  std::size_t n;
  struct It {
    std::size_t i;
    std::size_t operator*() const { return i; }
    It& operator++() { ++i; return *this; }
    bool operator!=(const It& o) const { return i != o.i; }
  };
  It begin() const { return {0}; }
  It end() const { return {n}; }
};

Metric metric_of(const GroupMetrics& g, std::size_t m) {
  switch (m) {
    case 0: return g.precision;
    case 1: return g.recall;
    case 2: return g.f1;
    default: return g.fn_ratio;
  }
}

}  // namespace

ClassMetrics classification_metrics(std::span<const AdmissionClass> truth,
                                    std::span<const int> predicted_itu) {
  require_same_length(truth, predicted_itu, "classification_metrics");
  return metrics_over(truth, predicted_itu, IotaRange{truth.size()});
}

std::vector<int> threshold_predictions(std::span<const double> p) {
  std::vector<int> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = predict_positive(p[i]) ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

std::vector<BootstrapCI> bootstrap_many(const IndexMetrics& metrics, std::size_t n,
                                        std::size_t resamples, std::uint64_t seed) {
  if (n == 0) throw DataError("bootstrap: empty test set");
  if (resamples == 0) throw DataError("bootstrap: resamples must be >= 1");
  std::vector<std::vector<double>> values;
  std::vector<std::size_t> idx(n);
  std::uniform_int_distribution<std::size_t> draw(0, n - 1);
  for (std::size_t r = 0; r < resamples; ++r) {
    Rng rng = make_rng(seed, r);
    for (auto& i : idx) i = draw(rng);
    auto ms = metrics(idx);
    if (values.empty()) values.resize(ms.size());
    if (ms.size() != values.size())
      throw DataError("bootstrap: metric count changed between resamples");
    for (std::size_t k = 0; k < ms.size(); ++k)
      if (ms[k]) values[k].push_back(*ms[k]);
  }
  std::vector<BootstrapCI> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto& ci = out[k];
    ci.resamples = resamples;
    ci.seed = seed;
    ci.defined = values[k].size();
    if (2 * ci.defined < resamples) {
      ci.diagnostic = fmt::format("metric undefined on {} of {} resamples",
                                  resamples - ci.defined, resamples);
      continue;
    }
    const auto& v = values[k];
    ci.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    ci.lower = percentile(v, 2.5);
    ci.upper = percentile(v, 97.5);
  }
  return out;
}

BootstrapCI bootstrap_ci(const IndexMetric& metric, std::size_t n, std::size_t resamples,
                         std::uint64_t seed) {
  auto wrapped = [&](std::span<const std::size_t> idx) {
    return std::vector<Metric>{metric(idx)};
  };
  return bootstrap_many(wrapped, n, resamples, seed).front();
}

MetricsReport metrics_report(std::span<const AdmissionClass> truth,
                             std::span<const int> predicted_itu, std::size_t resamples,
                             std::uint64_t seed) {
  MetricsReport report;
  report.point = classification_metrics(truth, predicted_itu);
  auto all = [&](std::span<const std::size_t> idx) {
    const auto m = metrics_over(truth, predicted_itu, idx);
    std::vector<Metric> out;
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t k = 0; k < 4; ++k) out.push_back(metric_of(m.groups[g], k));
    return out;
  };
  const auto cis = bootstrap_many(all, truth.size(), resamples, seed);
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t k = 0; k < 4; ++k) report.cells[g][k] = cis[g * 4 + k];
  return report;
}

// ---------------------------------------------------------------------------
// Calibration

CalibrationCurve calibration_curve(std::span<const int> y, std::span<const double> p,
                                   std::size_t n_bins) {
  require_same_length(y, p, "calibration_curve");
  if (n_bins == 0) throw DataError("calibration_curve: n_bins must be >= 1");
  std::vector<double> sum_p(n_bins, 0.0), sum_y(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0))
      throw DataError(fmt::format("calibration_curve: probability {} outside [0,1]", p[i]));
    const auto b = std::min(static_cast<std::size_t>(p[i] * static_cast<double>(n_bins)),
                            n_bins - 1);
    sum_p[b] += p[i];
    sum_y[b] += y[i] != 0 ? 1.0 : 0.0;
    ++count[b];
  }
  CalibrationCurve curve;
  curve.n_bins = n_bins;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    curve.bins.push_back({b, sum_p[b] / c, sum_y[b] / c, count[b]});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Parity

ParityReport parity_ratios(const ClassMetrics& a, const ClassMetrics& b,
                           std::string label_a, std::string label_b) {
  ParityReport r;
  r.label_a = std::move(label_a);
  r.label_b = std::move(label_b);
  for (std::size_t row = 0; row < 2; ++row)
    for (std::size_t m = 0; m < 4; ++m) {
      ParityCell& c = r.cells[row][m];
      c.a = metric_of(a.groups[row], m);
      c.b = metric_of(b.groups[row], m);
      if (c.a && c.b && *c.b != 0.0) c.ratio = *c.a / *c.b;
    }
  return r;
}

ParityReport parity_by(ParityAxis axis, std::span<const AdmissionClass> truth,
                       std::span<const int> pred, std::span<const Demographics> demo) {
  require_same_length(truth, pred, "parity_by");
  require_same_length(truth, demo, "parity_by");
  std::vector<AdmissionClass> t[2];
  std::vector<int> p[2];
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int side = axis == ParityAxis::Sex ? (demo[i].sex == Sex::Male ? 0 : 1)
                                             : (demo[i].ethnicity == Ethnicity::White ? 0 : 1);
    t[side].push_back(truth[i]);
    p[side].push_back(pred[i]);
  }
  const bool sex = axis == ParityAxis::Sex;
  if (t[0].empty() || t[1].empty())
    throw DataError(fmt::format("parity_by: empty {} subgroup", sex ? "sex" : "ethnicity"));
  return parity_ratios(classification_metrics(t[0], p[0]), classification_metrics(t[1], p[1]),
                       sex ? "Male" : "White", sex ? "Female" : "NonWhite");
}

// ---------------------------------------------------------------------------
// Ensemble and missed-unplanned arithmetic

std::vector<double> ensemble_average(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "ensemble_average");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] + b[i]) / 2.0;
  return out;
}

MissedUnplanned missed_unplanned_reduction(std::size_t n_unplanned, std::size_t n_planned,
                                           double fn_unplanned) {
  if (n_unplanned + n_planned == 0)
    throw DataError("missed_unplanned_reduction: no ITU cases in test");
  if (!(fn_unplanned >= 0.0 && fn_unplanned <= 1.0))
    throw DataError("missed_unplanned_reduction: fn must be in [0,1]");
  MissedUnplanned m;
  m.baseline = static_cast<double>(n_unplanned) / static_cast<double>(n_unplanned + n_planned);
  m.residual = m.baseline * fn_unplanned;
  return m;
}

// ---------------------------------------------------------------------------
// Exports

std::string format_metric(const Metric& m, int digits) {
  if (!m) return "NA";
  return fmt::format("{:.{}f}", *m, digits);
}

void save_metrics_table(const MetricsReport& report, const std::filesystem::path& path,
                        std::string_view header) {
  static constexpr const char* kNames[4] = {"precision", "recall", "f1", "fn"};
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "group";
  for (const char* n : kNames) out << '\t' << n << "_mean\t" << n << "_lower\t" << n << "_upper";
  out << '\n';
  for (std::size_t g = 0; g < 4; ++g) {
    out << to_string(kReportGroups[g]);
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& ci = report.cells[g][k];
      out << '\t' << format_metric(ci.mean, 4) << '\t' << format_metric(ci.lower, 4) << '\t'
          << format_metric(ci.upper, 4);
    }
    out << '\n';
  }
  out << "# note: Planned/Unplanned precision is 1.0 whenever any patient of the subtype is "
         "predicted ITU (all such predictions are true positives), NA otherwise\n";
}

void save_calibration(const CalibrationCurve& curve, const std::filesystem::path& path,
                      std::string_view header) {
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "bin\tmean_pred\tobserved\tcount\n";
  for (const auto& b : curve.bins)
    out << b.index << '\t' << fmt::format("{:.6f}", b.mean_predicted) << '\t'
        << fmt::format("{:.6f}", b.observed_rate) << '\t' << b.count << '\n';
}

void save_parity(const ParityReport& r, const std::filesystem::path& path,
                 std::string_view header) {
  static constexpr const char* kMetrics[4] = {"precision", "recall", "f1", "fn"};
  static constexpr const char* kRows[2] = {"Ward", "ITU"};
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "group\tmetric\t" << r.label_a << '\t' << r.label_b << "\tratio\n";
  for (std::size_t row = 0; row < 2; ++row)
    for (std::size_t m = 0; m < 4; ++m) {
      const auto& c = r.cells[row][m];
      out << kRows[row] << '\t' << kMetrics[m] << '\t' << format_metric(c.a, 4) << '\t'
          << format_metric(c.b, 4) << '\t' << format_metric(c.ratio, 4) << '\n';
    }
}

}  // namespace itupred
