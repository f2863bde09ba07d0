#include "itupred/explain.h"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "itupred/error.h"
#include "itupred/io.h"
#include "itupred/rng.h"

namespace itupred {

namespace {

Eigen::VectorXd evaluate(const BatchModel& model, const Eigen::MatrixXd& rows) {
  Eigen::VectorXd out = model(rows);
  if (out.size() != rows.rows())
    throw DataError("model returned the wrong number of predictions");
  return out;
}

double factorial(std::size_t n) {
  double f = 1.0;
  for (std::size_t i = 2; i <= n; ++i) f *= static_cast<double>(i);
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapley values

Eigen::MatrixXd sample_background(const Eigen::MatrixXd& X, std::size_t cap,
                                  std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(X.rows());
  if (n == 0) throw DataError("sample_background: no rows");
  if (n <= cap) return X;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(cap), X.cols());
  for (std::size_t r = 0; r < cap; ++r)
    out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

ShapleyAttribution shapley_values(const BatchModel& model, const Eigen::VectorXd& x,
                                  const Eigen::MatrixXd& background,
                                  const ShapleyConfig& config) {
  const Eigen::Index d = x.size();
  const Eigen::Index B = background.rows();
  if (B == 0) throw DataError("shapley_values: empty background");
  if (background.cols() != d)
    throw DataError(fmt::format("shapley_values: background has {} columns, x has {}",
                                background.cols(), d));
  if (d == 0) throw DataError("shapley_values: no features");

  ShapleyAttribution out;
  out.method = config.method;
  out.seed = config.seed;
  out.phi = Eigen::VectorXd::Zero(d);
  out.baseline = evaluate(model, background).mean();
  out.prediction = evaluate(model, x.transpose())[0];

  if (config.method == ShapleyMethod::Exact) {
    if (static_cast<std::size_t>(d) > kMaxExactFeatures)
      throw ConfigError(fmt::format(
          "Exact Shapley supports at most {} features (got {}); use the sampled method",
          kMaxExactFeatures, d));
    const std::size_t n_masks = std::size_t{1} << d;
    std::vector<double> v(n_masks);
    Eigen::MatrixXd rows(B, d);
    for (std::size_t mask = 0; mask < n_masks; ++mask) {
      rows = background;
      for (Eigen::Index j = 0; j < d; ++j)
        if (mask & (std::size_t{1} << j)) rows.col(j).setConstant(x[j]);
      v[mask] = evaluate(model, rows).mean();
    }
    std::vector<double> weight(static_cast<std::size_t>(d));
    const double total = factorial(static_cast<std::size_t>(d));
    for (std::size_t s = 0; s < weight.size(); ++s)
      weight[s] = factorial(s) * factorial(weight.size() - s - 1) / total;
    for (std::size_t mask = 0; mask < n_masks; ++mask) {
      const auto size = static_cast<std::size_t>(std::popcount(mask));
      for (Eigen::Index j = 0; j < d; ++j) {
        const std::size_t bit = std::size_t{1} << j;
        if (mask & bit) continue;
        out.phi[j] += weight[size] * (v[mask | bit] - v[mask]);
      }
    }
    return out;
  }

  const std::size_t pairs = std::max<std::size_t>(1, (config.permutations + 1) / 2);
  out.permutations = 2 * pairs;
  Rng rng = make_rng(config.seed, 0);
  std::vector<Eigen::Index> bg_order(static_cast<std::size_t>(B));
  std::iota(bg_order.begin(), bg_order.end(), 0);
  std::shuffle(bg_order.begin(), bg_order.end(), rng);

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  constexpr std::size_t kChunk = 128;  // permutation pairs per model call
  for (std::size_t start = 0; start < pairs; start += kChunk) {
    const std::size_t count = std::min(kChunk, pairs - start);
    std::vector<std::vector<Eigen::Index>> orders;
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(count * 2) * (d + 1), d);
    Eigen::Index r = 0;
    for (std::size_t k = 0; k < count; ++k) {
      std::shuffle(perm.begin(), perm.end(), rng);
      const Eigen::Index b = bg_order[(start + k) % bg_order.size()];
      for (int dir = 0; dir < 2; ++dir) {
        std::vector<Eigen::Index> order = perm;
        if (dir == 1) std::reverse(order.begin(), order.end());
        Eigen::RowVectorXd z = background.row(b);
        rows.row(r++) = z;
        for (Eigen::Index j : order) {
          z[j] = x[j];
          rows.row(r++) = z;
        }
        orders.push_back(std::move(order));
      }
    }
    const Eigen::VectorXd f = evaluate(model, rows);
    r = 0;
    for (const auto& order : orders) {
      double prev = f[r++];
      for (Eigen::Index j : order) {
        const double cur = f[r++];
        out.phi[j] += cur - prev;
        prev = cur;
      }
    }
  }
  out.phi /= static_cast<double>(out.permutations);
  return out;
}

GlobalShapSummary global_summary(const std::vector<ShapleyAttribution>& attributions,
                                 const Eigen::MatrixXd& feature_values) {
  if (attributions.empty()) throw DataError("global_summary: no attributions");
  const Eigen::Index d = attributions.front().phi.size();
  const auto n = static_cast<Eigen::Index>(attributions.size());
  if (feature_values.rows() != n || feature_values.cols() != d)
    throw DataError("global_summary: feature values do not match attributions");
  GlobalShapSummary s;
  s.phi.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& phi = attributions[static_cast<std::size_t>(i)].phi;
    if (phi.size() != d) throw DataError("global_summary: inconsistent attribution sizes");
    s.phi.row(i) = phi.transpose();
  }
  s.values = feature_values;
  s.mean_abs = s.phi.cwiseAbs().colwise().mean().transpose();
  s.ranking.resize(static_cast<std::size_t>(d));
  std::iota(s.ranking.begin(), s.ranking.end(), 0);
  std::stable_sort(s.ranking.begin(), s.ranking.end(), [&](std::size_t a, std::size_t b) {
    return s.mean_abs[static_cast<Eigen::Index>(a)] > s.mean_abs[static_cast<Eigen::Index>(b)];
  });
  return s;
}

// ---------------------------------------------------------------------------
// LIME

std::pair<Eigen::VectorXd, double> weighted_ridge(const Eigen::MatrixXd& Z,
                                                  const Eigen::VectorXd& y,
                                                  const Eigen::VectorXd& w, double lambda) {
  const double wsum = w.sum();
  if (!(wsum > 0.0)) throw DataError("weighted_ridge: weights sum to zero");
  const Eigen::RowVectorXd zbar = (w.transpose() * Z) / wsum;
  const double ybar = w.dot(y) / wsum;
  const Eigen::MatrixXd Zc = Z.rowwise() - zbar;
  const Eigen::VectorXd yc = y.array() - ybar;
  Eigen::MatrixXd A = Zc.transpose() * w.asDiagonal() * Zc;
  A.diagonal().array() += lambda;
  const Eigen::VectorXd rhs = Zc.transpose() * w.asDiagonal() * yc;
  Eigen::VectorXd beta = A.ldlt().solve(rhs);
  if (!beta.allFinite() || (A * beta - rhs).norm() > 1e-6 * (1.0 + rhs.norm()))
    beta = A.completeOrthogonalDecomposition().solve(rhs);
  return {beta, ybar - zbar.dot(beta)};
}

LimeExplanation lime_explain(const BatchModel& model, const Eigen::VectorXd& x,
                             const LimeConfig& config) {
  const Eigen::Index K = x.size();
  if (K == 0) throw DataError("lime_explain: no features");
  if (!(config.ridge_lambda >= 0.0)) throw ConfigError("lime.ridge_lambda must be >= 0");
  if (config.kernel_width && !(*config.kernel_width > 0.0))
    throw ConfigError("lime.kernel_width must be > 0");

  LimeExplanation out;
  out.seed = config.seed;
  out.kernel_width = config.kernel_width.value_or(0.75 * std::sqrt(static_cast<double>(K)));

  Eigen::MatrixXd Z;
  if (config.exhaustive) {
    if (K > 20) throw ConfigError("lime: exhaustive perturbation supports at most 20 features");
    const Eigen::Index n = Eigen::Index{1} << K;
    Z.resize(n, K);
    for (Eigen::Index m = 0; m < n; ++m)
      for (Eigen::Index j = 0; j < K; ++j) Z(m, j) = ((m >> j) & 1) ? 1.0 : 0.0;
  } else {
    if (config.n_perturbations < static_cast<std::size_t>(K) + 2)
      throw ConfigError(fmt::format("lime.n_perturbations must be >= K + 2 = {}", K + 2));
    const auto n = static_cast<Eigen::Index>(config.n_perturbations);
    Z.resize(n, K);
    Rng rng = make_rng(config.seed, 0);
    std::bernoulli_distribution coin(0.5);
    Z.row(0).setOnes();
    for (Eigen::Index m = 1; m < n; ++m)
      for (Eigen::Index j = 0; j < K; ++j) Z(m, j) = coin(rng) ? 1.0 : 0.0;
  }
  out.n_perturbations = static_cast<std::size_t>(Z.rows());

  const Eigen::MatrixXd mapped = Z.array().rowwise() * x.transpose().array();
  const Eigen::VectorXd f = evaluate(model, mapped);
  out.prediction = evaluate(model, x.transpose())[0];

  const double sigma2 = out.kernel_width * out.kernel_width;
  Eigen::VectorXd w(Z.rows());
  for (Eigen::Index m = 0; m < Z.rows(); ++m) {
    const double dist = (1.0 - Z.row(m).mean());
    w[m] = std::exp(-dist * dist / sigma2);
  }

  if (f.maxCoeff() - f.minCoeff() < 1e-12) {
    out.degenerate = true;
    out.coefficients = Eigen::VectorXd::Zero(K);
    out.importance = Eigen::VectorXd::Zero(K);
    out.intercept = f[0];
    out.r2 = std::nan("");
    return out;
  }

  auto [beta, intercept] = weighted_ridge(Z, f, w, config.ridge_lambda);
  out.coefficients = beta;
  out.importance = beta.cwiseAbs();
  out.intercept = intercept;
  const Eigen::VectorXd pred = (Z * beta).array() + intercept;
  const double ybar = w.dot(f) / w.sum();
  const double ss_res = w.dot((f - pred).array().square().matrix());
  const double ss_tot = w.dot((f.array() - ybar).square().matrix());
  out.r2 = 1.0 - ss_res / ss_tot;
  return out;
}

// ---------------------------------------------------------------------------
// Exports

void save_shap_summary(const GlobalShapSummary& s, const std::vector<std::string>& names,
                       const std::filesystem::path& path, std::string_view header) {
  if (names.size() != static_cast<std::size_t>(s.mean_abs.size()))
    throw DataError("save_shap_summary: feature name count mismatch");
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "rank\tfeature\tmean_abs_phi\n";
  for (std::size_t r = 0; r < s.ranking.size(); ++r)
    out << r + 1 << '\t' << names[s.ranking[r]] << '\t'
        << fmt::format("{:.6g}", s.mean_abs[static_cast<Eigen::Index>(s.ranking[r])]) << '\n';
}

void save_shap_points(const GlobalShapSummary& s, const std::vector<std::string>& sample_ids,
                      const std::vector<std::string>& names, const std::filesystem::path& path,
                      std::string_view header) {
  if (sample_ids.size() != static_cast<std::size_t>(s.phi.rows()) ||
      names.size() != static_cast<std::size_t>(s.phi.cols()))
    throw DataError("save_shap_points: label count mismatch");
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "sample\tfeature\tvalue\tphi\n";
  for (Eigen::Index i = 0; i < s.phi.rows(); ++i)
    for (std::size_t j : s.ranking) {
      const auto c = static_cast<Eigen::Index>(j);
      out << sample_ids[static_cast<std::size_t>(i)] << '\t' << names[j] << '\t'
          << io::num(s.values(i, c)) << '\t' << fmt::format("{:.6g}", s.phi(i, c)) << '\n';
    }
}

void save_lime(const LimeExplanation& e, const Eigen::VectorXd& x,
               const std::vector<std::string>& names, std::string_view sample_id,
               const std::filesystem::path& path, std::string_view header) {
  if (names.size() != static_cast<std::size_t>(e.coefficients.size()) ||
      x.size() != e.coefficients.size())
    throw DataError("save_lime: feature count mismatch");
  std::vector<std::size_t> order(names.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return e.importance[static_cast<Eigen::Index>(a)] > e.importance[static_cast<Eigen::Index>(b)];
  });
  auto out = io::open_output(path);
  io::write_header(out, header);
  out << "feature\tvalue\tscore\tdirection\n";
  for (std::size_t j : order) {
    const double c = e.coefficients[static_cast<Eigen::Index>(j)];
    out << names[j] << '\t' << io::num(x[static_cast<Eigen::Index>(j)]) << '\t'
        << fmt::format("{:.6g}", c) << '\t' << (c > 0 ? "ITU" : c < 0 ? "Ward" : "none") << '\n';
  }
  out << "# sample " << sample_id << " prediction " << fmt::format("{:.6g}", e.prediction)
      << " r2 " << (std::isnan(e.r2) ? std::string("NA") : fmt::format("{:.6g}", e.r2))
      << " kernel_width " << fmt::format("{:.6g}", e.kernel_width) << " n_perturbations "
      << e.n_perturbations << (e.degenerate ? " degenerate" : "") << '\n';
}

}  // namespace itupred
