#include <doctest.h>

#include <cmath>
#include <random>

#include "itupred/error.h"
#include "itupred/explain.h"
#include "itupred/forest.h"
#include "support.h"

using namespace itupred;

namespace {

Eigen::MatrixXd random_counts(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = static_cast<double>(rng() % 4);
  return X;
}

ForestModel random_forest(Eigen::Index d, std::uint64_t seed, std::size_t trees = 8) {
  const Eigen::MatrixXd X = random_counts(80, d, seed);
  std::vector<int> y(80);
  for (Eigen::Index i = 0; i < 80; ++i)
    y[static_cast<std::size_t>(i)] = X(i, 0) + X(i, d - 1) + static_cast<double>(i % 3) > 4.0;
  ForestConfig c;
  c.n_trees = trees;
  c.max_depth = 4;
  c.seed = seed;
  return fit_forest(X, y, c);
}

ShapleyConfig exact() {
  ShapleyConfig c;
  c.method = ShapleyMethod::Exact;
  return c;
}

}  // namespace

TEST_CASE("shapley on analytic models") {
  SUBCASE("constant model") {
    const BatchModel f = [](const Eigen::MatrixXd& X) { return Eigen::VectorXd::Constant(X.rows(), 0.3); };
    const auto a = shapley_values(f, Eigen::VectorXd::Ones(3), Eigen::MatrixXd::Zero(4, 3), exact());
    CHECK(a.phi.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.baseline == doctest::Approx(0.3));
  }
  SUBCASE("additive model") {
    const BatchModel f = [](const Eigen::MatrixXd& X) -> Eigen::VectorXd { return X.col(0) + X.col(1); };
    Eigen::VectorXd x(2);
    x << 2, 3;
    const auto a = shapley_values(f, x, Eigen::MatrixXd::Zero(1, 2), exact());
    CHECK(a.phi(0) == doctest::Approx(2.0));
    CHECK(a.phi(1) == doctest::Approx(3.0));
    ShapleyConfig s;
    s.permutations = 10;
    const auto b = shapley_values(f, x, Eigen::MatrixXd::Zero(1, 2), s);
    CHECK(b.phi(0) == doctest::Approx(2.0));
  }
  SUBCASE("symmetric features share credit") {
    const BatchModel f = [](const Eigen::MatrixXd& X) -> Eigen::VectorXd {
      return (X.col(0).array() * X.col(1).array() + X.col(2).array()).matrix();
    };
    Eigen::VectorXd x(3);
    x << 2, 2, 1;
    Eigen::MatrixXd bg(3, 3);
    bg << 0, 0, 1, 1, 1, 0, 3, 3, 2;
    const auto a = shapley_values(f, x, bg, exact());
    CHECK(a.phi(0) == doctest::Approx(a.phi(1)).epsilon(1e-12));
  }
  SUBCASE("errors") {
    const BatchModel f = [](const Eigen::MatrixXd& X) { return Eigen::VectorXd::Zero(X.rows()); };
    CHECK_THROWS_AS(shapley_values(f, Eigen::VectorXd::Zero(13), Eigen::MatrixXd::Zero(2, 13), exact()),
                    ConfigError);
    CHECK_THROWS_AS(shapley_values(f, Eigen::VectorXd::Zero(3), Eigen::MatrixXd(0, 3), exact()), DataError);
    CHECK_THROWS_AS(shapley_values(f, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Zero(2, 4), exact()),
                    DataError);
  }
}

TEST_CASE("shapley properties on random forests") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Eigen::Index d = 3 + static_cast<Eigen::Index>(s % 4);
    const ForestModel m = random_forest(d, s);
    const BatchModel f = as_batch_model(m);
    const Eigen::MatrixXd bg = random_counts(10, d, s + 50);
    const Eigen::VectorXd x = random_counts(1, d, s + 90).row(0).transpose();
    const auto a = shapley_values(f, x, bg, exact());
    CHECK(std::abs(a.phi.sum() - (a.prediction - a.baseline)) < 1e-6);
    CHECK(a.baseline == doctest::Approx(f(bg).mean()));

    std::vector<bool> used(static_cast<std::size_t>(d), false);
    for (const auto& t : m.trees)
      for (int feat : t.feature)
        if (feat >= 0) used[static_cast<std::size_t>(feat)] = true;
    for (Eigen::Index j = 0; j < d; ++j)
      if (!used[static_cast<std::size_t>(j)]) CHECK(a.phi(j) == 0.0);
  }
}

TEST_CASE("null player on a feature the forest cannot split") {
  Eigen::MatrixXd X = random_counts(60, 4, 3);
  X.col(2).setConstant(1.0);
  std::vector<int> y(60);
  for (Eigen::Index i = 0; i < 60; ++i) y[static_cast<std::size_t>(i)] = X(i, 0) > 1;
  ForestConfig c;
  c.n_trees = 10;
  const ForestModel m = fit_forest(X, y, c);
  Eigen::VectorXd x(4);
  x << 3, 0, 7, 2;
  const auto a = shapley_values(as_batch_model(m), x, random_counts(8, 4, 4), exact());
  CHECK(a.phi(2) == 0.0);
}

TEST_CASE("sampled shapley agrees with exact at d = 8") {
  const ForestModel m = random_forest(8, 77, 20);
  const BatchModel f = as_batch_model(m);
  const Eigen::MatrixXd bg = random_counts(20, 8, 78);
  ShapleyConfig s;
  s.permutations = 2000;
  s.seed = 5;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const Eigen::VectorXd x = random_counts(1, 8, 100 + k).row(0).transpose();
    const auto e = shapley_values(f, x, bg, exact());
    const auto a = shapley_values(f, x, bg, s);
    CHECK((e.phi - a.phi).cwiseAbs().maxCoeff() < 0.02);
    CHECK(shapley_values(f, x, bg, s).phi == a.phi);
  }
}

TEST_CASE("background sampling") {
  const Eigen::MatrixXd X = random_counts(300, 3, 1);
  const Eigen::MatrixXd b = sample_background(X, 100, 2);
  CHECK(b.rows() == 100);
  CHECK(sample_background(X, 100, 2) == b);
  CHECK(sample_background(X.topRows(50), 100, 2) == X.topRows(50));
}

TEST_CASE("global summary") {
  SUBCASE("single sample ranks by its own magnitudes") {
    ShapleyAttribution a;
    a.phi = Eigen::VectorXd(4);
    a.phi << 0.1, -0.5, 0.3, 0.0;
    const auto g = global_summary({a}, Eigen::MatrixXd::Zero(1, 4));
    CHECK(g.ranking == std::vector<std::size_t>{1, 2, 0, 3});
    CHECK(g.mean_abs(1) == 0.5);
  }
  SUBCASE("all zero keeps feature order") {
    ShapleyAttribution a;
    a.phi = Eigen::VectorXd::Zero(3);
    const auto g = global_summary({a, a}, Eigen::MatrixXd::Zero(2, 3));
    CHECK(g.ranking == std::vector<std::size_t>{0, 1, 2});
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(global_summary({}, Eigen::MatrixXd::Zero(0, 3)), DataError);
    ShapleyAttribution a;
    a.phi = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(global_summary({a}, Eigen::MatrixXd::Zero(1, 2)), DataError);
  }
}

TEST_CASE("lime") {
  Eigen::VectorXd x(6);
  x << 2, 0, 1, 3, 1, 5;

  SUBCASE("a model ignoring every feature gives zero coefficients") {
    const BatchModel f = [](const Eigen::MatrixXd& X) { return Eigen::VectorXd::Constant(X.rows(), 0.4); };
    LimeConfig c;
    c.n_perturbations = 500;
    const auto e = lime_explain(f, x, c);
    CHECK(e.coefficients.cwiseAbs().maxCoeff() < 1e-9);
    CHECK(e.degenerate);
  }
  SUBCASE("an indicator model puts its weight on that feature") {
    const BatchModel f = [](const Eigen::MatrixXd& X) -> Eigen::VectorXd {
      return (X.col(3).array() > 0).cast<double>().matrix();
    };
    LimeConfig c;
    c.exhaustive = true;
    const auto e = lime_explain(f, x, c);
    Eigen::Index top = 0;
    e.importance.maxCoeff(&top);
    CHECK(top == 3);
    CHECK(e.coefficients(3) > 0.0);
    CHECK(e.prediction == 1.0);
    CHECK(e.r2 > 0.99);
  }
  SUBCASE("wide kernel and vanishing penalty recover the unweighted least squares fit") {
    const BatchModel f = [](const Eigen::MatrixXd& X) -> Eigen::VectorXd {
      Eigen::VectorXd out(X.rows());
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        out(i) = 1.0 / (1.0 + std::exp(-(0.5 * X(i, 0) - X(i, 2) + 0.3 * X(i, 0) * X(i, 5) - 1.0)));
      return out;
    };
    LimeConfig c;
    c.exhaustive = true;
    c.kernel_width = 1e6;
    c.ridge_lambda = 1e-10;
    const auto e = lime_explain(f, x, c);

    // Oracle: ordinary least squares with an intercept over all 2^6 masks.
    Eigen::MatrixXd A(64, 7);
    Eigen::MatrixXd mapped(64, 6);
    for (int z = 0; z < 64; ++z) {
      A(z, 0) = 1.0;
      for (int j = 0; j < 6; ++j) {
        const bool keep = (z >> j) & 1;
        A(z, j + 1) = keep;
        mapped(z, j) = keep ? x(j) : 0.0;
      }
    }
    const Eigen::VectorXd beta = A.colPivHouseholderQr().solve(f(mapped));
    for (int j = 0; j < 6; ++j) CHECK(e.coefficients(j) == doctest::Approx(beta(j + 1)).epsilon(1e-6));
    CHECK(e.intercept == doctest::Approx(beta(0)).epsilon(1e-6));
  }
  SUBCASE("deterministic per seed") {
    const ForestModel m = random_forest(6, 4);
    const BatchModel f = as_batch_model(m);
    LimeConfig c;
    c.n_perturbations = 300;
    c.seed = 8;
    CHECK(lime_explain(f, x, c).coefficients == lime_explain(f, x, c).coefficients);
    CHECK(lime_explain(f, x, c).kernel_width == doctest::Approx(0.75 * std::sqrt(6.0)));
  }
  SUBCASE("too few perturbations") {
    const BatchModel f = [](const Eigen::MatrixXd& X) { return Eigen::VectorXd::Zero(X.rows()); };
    LimeConfig c;
    c.n_perturbations = 7;
    CHECK_THROWS_AS(lime_explain(f, x, c), ConfigError);
  }
}

TEST_CASE("weighted ridge") {
  Eigen::MatrixXd Z(4, 1);
  Z << 0, 1, 2, 3;
  Eigen::VectorXd y(4);
  y << 1, 3, 5, 7;
  const auto [coef, intercept] = weighted_ridge(Z, y, Eigen::VectorXd::Ones(4), 0.0);
  CHECK(coef(0) == doctest::Approx(2.0));
  CHECK(intercept == doctest::Approx(1.0));
  const auto [shrunk, i2] = weighted_ridge(Z, y, Eigen::VectorXd::Ones(4), 10.0);
  CHECK(shrunk(0) < 2.0);
  CHECK(shrunk(0) > 0.0);
}

TEST_CASE("explanation exports") {
  testing::TempDir dir("explain");
  ShapleyAttribution a;
  a.phi = Eigen::VectorXd(2);
  a.phi << 0.2, -0.4;
  const auto g = global_summary({a}, Eigen::MatrixXd::Ones(1, 2));
  save_shap_summary(g, {"alpha", "beta"}, dir / "s.tsv", "# h");
  const std::string s = testing::read_file(dir / "s.tsv");
  CHECK(s.find("beta") < s.find("alpha"));
  save_shap_points(g, {"P1"}, {"alpha", "beta"}, dir / "p.tsv", "# h");
  CHECK(testing::read_file(dir / "p.tsv").find("P1") != std::string::npos);

  LimeExplanation e;
  e.coefficients = Eigen::VectorXd(2);
  e.coefficients << -0.1, 0.3;
  e.importance = e.coefficients.cwiseAbs();
  save_lime(e, Eigen::VectorXd::Ones(2), {"alpha", "beta"}, "P1", dir / "l.tsv", "# h");
  const std::string l = testing::read_file(dir / "l.tsv");
  CHECK(l.find("beta") < l.find("alpha"));
  CHECK(l.find("ITU") != std::string::npos);
}
