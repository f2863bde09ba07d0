#include "itupred/forest.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "itupred/error.h"
#include "itupred/eval.h"
#include "itupred/io.h"
#include "itupred/rng.h"
#include "json.hpp"

namespace itupred {

namespace {

std::array<std::size_t, 2> class_sizes(const std::vector<int>& y) {
  std::array<std::size_t, 2> n{0, 0};
  for (int v : y) {
    if (v != 0 && v != 1) throw DataError(fmt::format("labels must be 0/1 (got {})", v));
    ++n[v];
  }
  return n;
}

void require_two_classes(const std::vector<int>& y, std::string_view what) {
  auto n = class_sizes(y);
  if (n[0] == 0 || n[1] == 0)
    throw DataError(fmt::format("{}: labels contain a single class", what));
}

}  // namespace

// ---------------------------------------------------------------------------
// K-best selection

FeatureScores chi2_feature_scores(const Eigen::MatrixXd& X, const std::vector<int>& y) {
  if (static_cast<std::size_t>(X.rows()) != y.size())
    throw DataError(fmt::format("chi2_feature_scores: {} rows but {} labels", X.rows(),
                                y.size()));
  if ((X.array() < 0.0).any())
    throw DataError("chi2_feature_scores: counts must be non-negative");
  require_two_classes(y, "chi2_feature_scores");
  const auto sizes = class_sizes(y);
  const double n = static_cast<double>(y.size());

  const auto d = static_cast<std::size_t>(X.cols());
  FeatureScores fs;
  fs.scores.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double observed[2] = {0.0, 0.0};
    for (Eigen::Index i = 0; i < X.rows(); ++i) observed[y[i]] += X(i, j);
    const double total = observed[0] + observed[1];
    if (total == 0.0) continue;
    double score = 0.0;
    for (int c = 0; c < 2; ++c) {
      const double expected = total * static_cast<double>(sizes[c]) / n;
      score += (observed[c] - expected) * (observed[c] - expected) / expected;
    }
    fs.scores[j] = score;
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return fs.scores[a] > fs.scores[b];
  });
  fs.rank.assign(d, 0);
  for (std::size_t r = 0; r < d; ++r) fs.rank[order[r]] = r;
  return fs;
}

std::vector<std::size_t> select_k_best(FeatureScores& scores, std::size_t k) {
  const std::size_t d = scores.scores.size();
  if (k == 0 || k > d)
    throw DataError(fmt::format("select_k_best: k={} outside [1, {}]", k, d));
  std::vector<std::size_t> out(d);
  for (std::size_t j = 0; j < d; ++j) out[scores.rank[j]] = j;
  out.resize(k);
  scores.selected_k = k;
  return out;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X,
                               const std::vector<std::size_t>& columns) {
  Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c] >= static_cast<std::size_t>(X.cols()))
      throw DataError(fmt::format("select_columns: column {} out of range", columns[c]));
    out.col(static_cast<Eigen::Index>(c)) = X.col(static_cast<Eigen::Index>(columns[c]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trees

double gini_impurity(double positives, double n) {
  if (n <= 0.0) return 0.0;
  const double p = positives / n;
  return 1.0 - p * p - (1.0 - p) * (1.0 - p);
}

double DecisionTree::predict(const double* row, std::ptrdiff_t stride) const {
  int node = 0;
  while (feature[node] >= 0)
    node = row[feature[node] * stride] <= threshold[node] ? left[node] : right[node];
  return value[node];
}

void validate_forest_config(const ForestConfig& c, std::size_t d) {
  if (c.n_trees < 1) throw ConfigError("forest.n_trees must be >= 1");
  if (c.min_samples_split < 2) throw ConfigError("forest.min_samples_split must be >= 2");
  if (c.min_samples_leaf < 1) throw ConfigError("forest.min_samples_leaf must be >= 1");
  if (c.max_depth && *c.max_depth < 1) throw ConfigError("forest.max_depth must be >= 1");
  if (c.features_per_split && (*c.features_per_split < 1 || *c.features_per_split > d))
    throw ConfigError(fmt::format("forest.features_per_split must be in [1, {}]", d));
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& X, const std::vector<int>& y,
              const ForestConfig& config, std::size_t mtry, Rng& rng)
      : X_(X), y_(y), config_(config), mtry_(mtry), rng_(rng),
        features_(static_cast<std::size_t>(X.cols())) {
    std::iota(features_.begin(), features_.end(), 0);
  }

  DecisionTree build(std::vector<std::size_t> samples) {
    samples_ = std::move(samples);
    grow(0, samples_.size(), 0);
    return std::move(tree_);
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double impurity = std::numeric_limits<double>::infinity();
  };

  int add_node(double value) {
    tree_.feature.push_back(-1);
    tree_.threshold.push_back(0.0);
    tree_.left.push_back(-1);
    tree_.right.push_back(-1);
    tree_.value.push_back(value);
    return static_cast<int>(tree_.size() - 1);
  }

  int grow(std::size_t begin, std::size_t end, std::size_t depth) {
    const std::size_t n = end - begin;
    std::size_t pos = 0;
    for (std::size_t i = begin; i < end; ++i) pos += static_cast<std::size_t>(y_[samples_[i]]);
    const int node = add_node(static_cast<double>(pos) / static_cast<double>(n));
    if (pos == 0 || pos == n || n < config_.min_samples_split ||
        n < 2 * config_.min_samples_leaf ||
        (config_.max_depth && depth >= *config_.max_depth))
      return node;

    const Split best = find_split(begin, end);
    if (best.feature < 0) return node;

    auto first = samples_.begin() + static_cast<std::ptrdiff_t>(begin);
    auto last = samples_.begin() + static_cast<std::ptrdiff_t>(end);
    auto mid = std::stable_partition(first, last, [&](std::size_t s) {
      return X_(static_cast<Eigen::Index>(s), best.feature) <= best.threshold;
    });
    const std::size_t split_at = static_cast<std::size_t>(mid - samples_.begin());

    tree_.feature[node] = best.feature;
    tree_.threshold[node] = best.threshold;
    const int l = grow(begin, split_at, depth + 1);
    tree_.left[node] = l;
    const int r = grow(split_at, end, depth + 1);
    tree_.right[node] = r;
    return node;
  }

  // Visits features in random order until `mtry_` non-constant ones have been
  // evaluated or all features are exhausted.
  Split find_split(std::size_t begin, std::size_t end) {
    Split best;
    const std::size_t d = features_.size();
    const double n = static_cast<double>(end - begin);
    std::size_t visited = 0;
    for (std::size_t i = 0; i < d && visited < mtry_; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, d - 1);
      std::swap(features_[i], features_[pick(rng_)]);
      const int f = static_cast<int>(features_[i]);

      buffer_.clear();
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t s = samples_[k];
        buffer_.emplace_back(X_(static_cast<Eigen::Index>(s), f), y_[s]);
      }
      std::sort(buffer_.begin(), buffer_.end());
      if (buffer_.front().first == buffer_.back().first) continue;
      ++visited;

      double total_pos = 0.0;
      for (const auto& b : buffer_) total_pos += b.second;
      double left_n = 0.0, left_pos = 0.0;
      for (std::size_t k = 0; k + 1 < buffer_.size(); ++k) {
        left_n += 1.0;
        left_pos += buffer_[k].second;
        if (buffer_[k].first == buffer_[k + 1].first) continue;
        const double right_n = n - left_n;
        if (left_n < static_cast<double>(config_.min_samples_leaf) ||
            right_n < static_cast<double>(config_.min_samples_leaf))
          continue;
        const double impurity =
            (left_n * gini_impurity(left_pos, left_n) +
             right_n * gini_impurity(total_pos - left_pos, right_n)) / n;
        if (impurity < best.impurity) {
          const double a = buffer_[k].first, b = buffer_[k + 1].first;
          double thr = a + (b - a) / 2.0;
          if (thr >= b) thr = a;
          best = {f, thr, impurity};
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& X_;
  const std::vector<int>& y_;
  const ForestConfig& config_;
  std::size_t mtry_;
  Rng& rng_;
  std::vector<std::size_t> features_;
  std::vector<std::size_t> samples_;
  std::vector<std::pair<double, int>> buffer_;
  DecisionTree tree_;
};

}  // namespace

ForestModel fit_forest(const Eigen::MatrixXd& X_in, const std::vector<int>& y_in,
                       const ForestConfig& config, std::span<const std::string> row_ids) {
  const auto n = static_cast<std::size_t>(X_in.rows());
  const auto d = static_cast<std::size_t>(X_in.cols());
  if (n != y_in.size())
    throw DataError(fmt::format("fit_forest: {} rows but {} labels", n, y_in.size()));
  if (!row_ids.empty() && row_ids.size() != n)
    throw DataError("fit_forest: row_ids size does not match rows");
  if (n < 2) throw DataError("fit_forest: need at least 2 rows");
  if (d < 1) throw DataError("fit_forest: need at least 1 feature");
  if (!X_in.allFinite()) throw NumericError("fit_forest: non-finite feature value");
  require_two_classes(y_in, "fit_forest");
  validate_forest_config(config, d);

  // Canonical row order so that resampling does not depend on input order.
  Eigen::MatrixXd X_sorted;
  std::vector<int> y_sorted;
  const Eigen::MatrixXd* X = &X_in;
  const std::vector<int>* y = &y_in;
  if (!row_ids.empty()) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row_ids[a] < row_ids[b]; });
    X_sorted.resize(X_in.rows(), X_in.cols());
    y_sorted.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      X_sorted.row(static_cast<Eigen::Index>(i)) = X_in.row(static_cast<Eigen::Index>(order[i]));
      y_sorted[i] = y_in[order[i]];
    }
    X = &X_sorted;
    y = &y_sorted;
  }

  ForestModel model;
  model.config = config;
  model.n_features = d;
  model.feature_means.resize(d);
  for (std::size_t j = 0; j < d; ++j)
    model.feature_means[j] = X->col(static_cast<Eigen::Index>(j)).mean();

  const std::size_t mtry = config.features_per_split.value_or(
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d)))));
  model.trees.reserve(config.n_trees);
  for (std::size_t t = 0; t < config.n_trees; ++t) {
    Rng rng = make_rng(config.seed, t);
    std::vector<std::size_t> samples(n);
    if (config.bootstrap) {
      std::uniform_int_distribution<std::size_t> draw(0, n - 1);
      for (auto& s : samples) s = draw(rng);
      std::sort(samples.begin(), samples.end());
    } else {
      std::iota(samples.begin(), samples.end(), 0);
    }
    TreeBuilder builder(*X, *y, config, mtry, rng);
    model.trees.push_back(builder.build(std::move(samples)));
  }
  return model;
}

double predict_proba(const ForestModel& model, std::span<const double> x) {
  if (x.size() != model.n_features)
    throw DataError(fmt::format("predict_proba: expected {} features, got {}",
                                model.n_features, x.size()));
  if (model.trees.empty()) throw DataError("predict_proba: model has no trees");
  double sum = 0.0;
  for (const auto& t : model.trees) sum += t.predict(x.data(), 1);
  return sum / static_cast<double>(model.trees.size());
}

Eigen::VectorXd predict_proba(const ForestModel& model, const Eigen::MatrixXd& X) {
  if (static_cast<std::size_t>(X.cols()) != model.n_features)
    throw DataError(fmt::format("predict_proba: expected {} features, got {}",
                                model.n_features, X.cols()));
  if (model.trees.empty()) throw DataError("predict_proba: model has no trees");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(X.rows());
  const std::ptrdiff_t stride = X.outerStride();
  for (const auto& t : model.trees)
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] += t.predict(X.data() + i, stride);
  return out / static_cast<double>(model.trees.size());
}

BatchModel as_batch_model(const ForestModel& model) {
  return [&model](const Eigen::MatrixXd& X) { return predict_proba(model, X); };
}

// ---------------------------------------------------------------------------
// Cross-validation

CrossValidationReport cross_validate(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                     const ForestConfig& config, std::size_t k_folds,
                                     std::size_t runs, std::size_t k_best) {
  if (k_folds < 2) throw ConfigError("cross_validate: k_folds must be >= 2");
  if (runs < 1) throw ConfigError("cross_validate: runs must be >= 1");
  if (static_cast<std::size_t>(X.rows()) != y.size())
    throw DataError("cross_validate: rows and labels differ in length");
  require_two_classes(y, "cross_validate");

  CrossValidationReport report;
  for (std::size_t run = 0; run < runs; ++run) {
    // Stratified assignment: shuffle each class and deal round-robin.
    std::vector<std::size_t> fold_of(y.size());
    Rng rng = make_rng(derive_seed(config.seed, 0xCF), run);
    for (int c = 0; c < 2; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] == c) members.push_back(i);
      std::shuffle(members.begin(), members.end(), rng);
      for (std::size_t r = 0; r < members.size(); ++r) fold_of[members[r]] = r % k_folds;
    }

    for (std::size_t fold = 0; fold < k_folds; ++fold) {
      std::vector<Eigen::Index> train_rows, valid_rows;
      std::vector<int> y_train, y_valid;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (fold_of[i] == fold) {
          valid_rows.push_back(static_cast<Eigen::Index>(i));
          y_valid.push_back(y[i]);
        } else {
          train_rows.push_back(static_cast<Eigen::Index>(i));
          y_train.push_back(y[i]);
        }
      }
      auto single = [](const std::vector<int>& v) {
        return std::all_of(v.begin(), v.end(), [&](int x) { return x == v.front(); });
      };
      if (y_valid.empty() || single(y_valid) || single(y_train))
        throw DataError(fmt::format("cross_validate: fold {} (run {}) is single-class",
                                    fold, run));

      Eigen::MatrixXd X_train = X(train_rows, Eigen::all);
      Eigen::MatrixXd X_valid = X(valid_rows, Eigen::all);
      if (k_best > 0) {
        auto scores = chi2_feature_scores(X_train, y_train);
        auto cols = select_k_best(scores, std::min<std::size_t>(k_best, X.cols()));
        X_train = select_columns(X_train, cols);
        X_valid = select_columns(X_valid, cols);
      }
      ForestConfig fold_config = config;
      fold_config.seed = derive_seed(config.seed, run * 1000 + fold + 1);
      const auto model = fit_forest(X_train, y_train, fold_config);
      const auto p = predict_proba(model, X_valid);

      std::vector<int> pred(y_valid.size());
      for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = predict_positive(p[i]) ? 1 : 0;
      FoldMetrics fm;
      fm.run = run;
      fm.fold = fold;
      for (int c = 0; c < 2; ++c) {
        auto m = binary_metrics(y_valid, pred, c);
        fm.values[c][0] = m.precision.value_or(std::nan(""));
        fm.values[c][1] = m.recall.value_or(std::nan(""));
        fm.values[c][2] = m.f1.value_or(std::nan(""));
      }
      report.folds.push_back(fm);
    }
  }

  for (int c = 0; c < 2; ++c)
    for (int m = 0; m < 3; ++m) {
      std::vector<double> v;
      for (const auto& f : report.folds)
        if (!std::isnan(f.values[c][m])) v.push_back(f.values[c][m]);
      MetricSummary& s = report.summary[c][m];
      s.defined = v.size();
      if (v.empty()) {
        s.mean = s.std = std::nan("");
        continue;
      }
      s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

void save_forest(const ForestModel& model, const std::filesystem::path& path,
                 std::string_view lineage) {
  using nlohmann::json;
  json trees = json::array();
  for (const auto& t : model.trees)
    trees.push_back({{"feature", t.feature},
                     {"threshold", t.threshold},
                     {"left", t.left},
                     {"right", t.right},
                     {"value", t.value}});
  const auto& c = model.config;
  json config{{"n_trees", c.n_trees},
              {"max_depth", c.max_depth ? json(*c.max_depth) : json(nullptr)},
              {"min_samples_split", c.min_samples_split},
              {"min_samples_leaf", c.min_samples_leaf},
              {"features_per_split",
               c.features_per_split ? json(*c.features_per_split) : json(nullptr)},
              {"bootstrap", c.bootstrap},
              {"seed", c.seed}};
  json doc{{"format_version", kForestFormatVersion},
           {"kind", "random_forest"},
           {"lineage", std::string(lineage)},
           {"config", std::move(config)},
           {"n_features", model.n_features},
           {"selected_features", model.selected_features},
           {"feature_names", model.feature_names},
           {"feature_means", model.feature_means},
           {"trees", std::move(trees)}};
  auto out = io::open_output(path);
  out << doc.dump() << '\n';
}

ForestModel load_forest(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  const std::string src = path.string();
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ParseError(src, 1, "<document>", "malformed JSON");
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kForestFormatVersion)
      throw ParseError(src, 1, "format_version",
                       fmt::format("unsupported version {}", version));
    if (doc.at("kind").get<std::string>() != "random_forest")
      throw ParseError(src, 1, "kind", "not a random_forest model");
    ForestModel m;
    const auto& c = doc.at("config");
    m.config.n_trees = c.at("n_trees").get<std::size_t>();
    if (!c.at("max_depth").is_null()) m.config.max_depth = c.at("max_depth").get<std::size_t>();
    m.config.min_samples_split = c.at("min_samples_split").get<std::size_t>();
    m.config.min_samples_leaf = c.at("min_samples_leaf").get<std::size_t>();
    if (!c.at("features_per_split").is_null())
      m.config.features_per_split = c.at("features_per_split").get<std::size_t>();
    m.config.bootstrap = c.at("bootstrap").get<bool>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.n_features = doc.at("n_features").get<std::size_t>();
    m.selected_features = doc.at("selected_features").get<std::vector<std::size_t>>();
    m.feature_names = doc.at("feature_names").get<std::vector<std::string>>();
    m.feature_means = doc.at("feature_means").get<std::vector<double>>();
    for (const auto& t : doc.at("trees")) {
      DecisionTree tree;
      tree.feature = t.at("feature").get<std::vector<int>>();
      tree.threshold = t.at("threshold").get<std::vector<double>>();
      tree.left = t.at("left").get<std::vector<int>>();
      tree.right = t.at("right").get<std::vector<int>>();
      tree.value = t.at("value").get<std::vector<double>>();
      const std::size_t sz = tree.feature.size();
      if (sz == 0 || tree.threshold.size() != sz || tree.left.size() != sz ||
          tree.right.size() != sz || tree.value.size() != sz)
        throw ParseError(src, 1, "trees", "inconsistent node arrays");
      for (std::size_t i = 0; i < sz; ++i) {
        if (tree.feature[i] < 0) continue;
        if (tree.feature[i] >= static_cast<int>(m.n_features) || tree.left[i] <= 0 ||
            tree.right[i] <= 0 || tree.left[i] >= static_cast<int>(sz) ||
            tree.right[i] >= static_cast<int>(sz))
          throw ParseError(src, 1, "trees", "node index out of range");
      }
      m.trees.push_back(std::move(tree));
    }
    if (m.trees.empty()) throw ParseError(src, 1, "trees", "no trees");
    return m;
  } catch (const json::exception& e) {
    throw ParseError(src, 1, "<document>", e.what());
  }
}

}  // namespace itupred
