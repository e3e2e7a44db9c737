#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "catch_amalgamated.hpp"
#include "mvpb/meta_model.hpp"
#include "support.hpp"

using Catch::Approx;
using namespace mvpb;

namespace {

Study complete(double y1, double s1, double y2, double s2, double rho) {
  Study s;
  s.id = "c";
  s.y = {y1, y2};
  s.se = {s1, s2};
  s.rho_w = rho;
  return s;
}

Study only(std::size_t j, double y, double se) {
  Study s;
  s.id = "p";
  s.y[j] = y;
  s.se[j] = se;
  return s;
}

// Restricted log-likelihood from the stacked N x N covariance and N x 2
// design, written out directly.
double dense_reml(const MetaDataset& d, const BrmaParams& p) {
  std::vector<std::pair<std::size_t, std::size_t>> rows;  // (study, outcome)
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      if (d.studies[i].has(j)) rows.emplace_back(i, j);
    }
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  bool active[2] = {d.outcome_count(0) > 0, d.outcome_count(1) > 0};
  std::vector<int> col(2, -1);
  int q = 0;
  for (int j = 0; j < 2; ++j) {
    if (active[j]) col[j] = q++;
  }
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n, n), x = Eigen::MatrixXd::Zero(n, q);
  Eigen::VectorXd y(n);
  const double t1 = std::sqrt(p.tau2[0]), t2 = std::sqrt(p.tau2[1]);
  for (Eigen::Index a = 0; a < n; ++a) {
    const auto [i, j] = rows[a];
    const Study& s = d.studies[i];
    y[a] = *s.y[j];
    x(a, col[j]) = 1.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto [i2, j2] = rows[b];
      if (i2 != i) continue;
      if (j2 == j) {
        v(a, b) = *s.se[j] * *s.se[j] + p.tau2[j];
      } else {
        v(a, b) = *s.se[0] * *s.se[1] * *s.rho_w + t1 * t2 * p.rho_b;
      }
    }
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(v);
  const Eigen::MatrixXd vix = ldlt.solve(x);
  const Eigen::MatrixXd xtvix = x.transpose() * vix;
  const Eigen::VectorXd beta = xtvix.ldlt().solve(vix.transpose() * y);
  const Eigen::VectorXd r = y - x * beta;
  const double logdet_v = ldlt.vectorD().array().log().sum();
  const double logdet_a = std::log(xtvix.determinant());
  return -0.5 * (logdet_v + logdet_a + r.dot(ldlt.solve(r)) +
                 static_cast<double>(n - q) * std::log(2.0 * std::numbers::pi));
}

// Univariate restricted log-likelihood (up to a constant) and its maximiser
// by grid search plus golden-section refinement.
double uni_reml(const std::vector<double>& y, const std::vector<double>& s, double t2) {
  double sw = 0.0, swy = 0.0, logdet = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = 1.0 / (s[i] * s[i] + t2);
    sw += w;
    swy += w * y[i];
    logdet += std::log(s[i] * s[i] + t2);
  }
  const double mu = swy / sw;
  double q = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) q += (y[i] - mu) * (y[i] - mu) / (s[i] * s[i] + t2);
  return -0.5 * (logdet + std::log(sw) + q);
}

double uni_reml_argmax(const std::vector<double>& y, const std::vector<double>& s) {
  const double hi = 20.0;
  const int n = 4000;
  int best = 0;
  double best_val = -1e300;
  for (int k = 0; k <= n; ++k) {
    const double v = uni_reml(y, s, hi * k / n);
    if (v > best_val) {
      best_val = v;
      best = k;
    }
  }
  double a = hi * std::max(0, best - 1) / n, b = hi * std::min(n, best + 1) / n;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - g * (b - a), e = a + g * (b - a);
    if (uni_reml(y, s, c) >= uni_reml(y, s, e)) {
      b = e;
    } else {
      a = c;
    }
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST_CASE("marginal_cov examples") {
  BrmaParams p;
  SECTION("no heterogeneity, unit se gives the identity") {
    const SmallMatrix v = marginal_cov(complete(0, 1, 0, 1, 0.0), p);
    REQUIRE(v.rows() == 2);
    CHECK(v.isApprox(Eigen::Matrix2d::Identity()));
  }
  SECTION("off-diagonal is s1 s2 rho_w + tau1 tau2 rho_b") {
    p.tau2 = {0.49, 1.44};
    p.rho_b = -0.3;
    const SmallMatrix v = marginal_cov(complete(0, 0.5, 0, 0.8, 0.6), p);
    CHECK(v(0, 1) == Approx(0.5 * 0.8 * 0.6 + 0.7 * 1.2 * -0.3));
    CHECK(v(1, 0) == v(0, 1));
    CHECK(v(0, 0) == Approx(0.25 + 0.49));
    CHECK(v(1, 1) == Approx(0.64 + 1.44));
  }
  SECTION("partial study gives the scalar s^2 + tau^2") {
    p.tau2 = {0.75, 2.0};
    const SmallMatrix v = marginal_cov(only(0, 1.0, 0.5), p);
    REQUIRE(v.rows() == 1);
    CHECK(v(0, 0) == Approx(1.0));
  }
  SECTION("perfect correlation with no heterogeneity is degenerate") {
    CHECK_THROWS_AS(marginal_cov(complete(0, 1, 0, 1, 1.0), p), DegenerateError);
  }
}

TEST_CASE("marginal_cov is symmetric with non-negative determinant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    BrmaParams p;
    p.tau2 = {2 * u(rng), 2 * u(rng)};
    p.rho_b = 1.98 * u(rng) - 0.99;
    const SmallMatrix v = marginal_cov(complete(0, 0.1 + u(rng), 0, 0.1 + u(rng), 1.98 * u(rng) - 0.99), p);
    CHECK(v(0, 1) == v(1, 0));
    CHECK(v.determinant() > 0.0);
  }
}

TEST_CASE("restricted log-likelihood matches a dense implementation") {
  std::mt19937_64 rng(11);
  for (double partial : {0.0, 0.4}) {
    const MetaDataset d = testing_support::random_dataset(rng, {.studies = 9, .partial_fraction = partial});
    for (auto [t1, t2, rb] : {std::tuple{0.3, 0.8, 0.2}, std::tuple{0.0, 1.5, -0.6}, std::tuple{2.0, 0.1, 0.9}}) {
      BrmaParams p;
      p.tau2 = {t1, t2};
      p.rho_b = rb;
      CHECK(restricted_loglik(d, p) == Approx(dense_reml(d, p)).epsilon(1e-10));
    }
  }
}

TEST_CASE("univariate reduction: equal se has the closed-form REML estimate") {
  const double s0 = 0.4;
  for (const std::vector<double>& y : {std::vector<double>{0.1, 1.3, -0.8, 2.2, 0.4, -1.1},
                                       std::vector<double>{0.05, -0.1, 0.2, 0.0, 0.12}}) {
    MetaDataset d;
    for (double v : y) d.studies.push_back(only(0, v, s0));
    double mean = 0.0;
    for (double v : y) mean += v / y.size();
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean) / (y.size() - 1);
    const BrmaFit fit = reml_fit(d);
    CHECK(fit.converged);
    CHECK(fit.params.tau2[0] == Approx(std::max(0.0, var - s0 * s0)).margin(1e-6));
    CHECK(fit.params.beta[0] == Approx(mean).margin(1e-8));
    CHECK_FALSE(fit.outcome_active[1]);
  }
}

TEST_CASE("univariate reduction matches a grid-search REML oracle") {
  std::mt19937_64 rng(21);
  for (int k = 0; k < 10; ++k) {
    const MetaDataset d =
        testing_support::random_dataset(rng, {.studies = 8 + 2 * k, .drop_outcome2 = true});
    std::vector<double> y, s;
    for (const auto& st : d.studies) {
      y.push_back(*st.y[0]);
      s.push_back(*st.se[0]);
    }
    CHECK(reml_fit(d).params.tau2[0] == Approx(uni_reml_argmax(y, s)).margin(1e-6));
  }
}

TEST_CASE("fit is at least as good as every point of a local grid") {
  std::mt19937_64 rng(31);
  for (double partial : {0.0, 0.3}) {
    const MetaDataset d =
        testing_support::random_dataset(rng, {.studies = 25, .partial_fraction = partial});
    const BrmaFit fit = reml_fit(d);
    REQUIRE(fit.converged);
    const double best = restricted_loglik(d, fit.params);
    CHECK(best == Approx(fit.loglik_restricted).epsilon(1e-12));
    double grid_best = -1e300;
    for (int a = 0; a < 10; ++a) {
      for (int b = 0; b < 10; ++b) {
        BrmaParams p = fit.params;
        p.tau2[0] = std::max(0.0, fit.params.tau2[0] * (0.5 + a / 9.0));
        p.rho_b = std::clamp(fit.params.rho_b - 0.3 + 0.6 * b / 9.0, -0.999, 0.999);
        grid_best = std::max(grid_best, restricted_loglik(d, p));
      }
    }
    CHECK(best >= grid_best - 1e-8);
  }
}

TEST_CASE("fit does not depend on study order") {
  std::mt19937_64 rng(41);
  MetaDataset d = testing_support::random_dataset(rng, {.studies = 20, .partial_fraction = 0.25});
  const BrmaFit a = reml_fit(d);
  std::shuffle(d.studies.begin(), d.studies.end(), rng);
  const BrmaFit b = reml_fit(d);
  for (int j = 0; j < 2; ++j) {
    CHECK(a.params.tau2[j] == Approx(b.params.tau2[j]).margin(1e-6));
    CHECK(a.params.beta[j] == Approx(b.params.beta[j]).margin(1e-6));
  }
  CHECK(a.params.rho_b == Approx(b.params.rho_b).margin(1e-5));
}

TEST_CASE("REML is consistent on large simulated datasets") {
  // One m = 1000 fit has sd(tau2) near 0.07, so the tolerance applies to the
  // mean over several fits.
  constexpr int kFits = 8;
  std::mt19937_64 rng(51);
  double t1 = 0.0, t2 = 0.0, rho = 0.0;
  for (int r = 0; r < kFits; ++r) {
    const MetaDataset d = testing_support::random_dataset(
        rng, {.studies = 1000, .tau2 = 1.1, .rho_w = 0.5, .rho_b = 0.5});
    const BrmaFit fit = reml_fit(d);
    CHECK(fit.converged);
    CHECK(fit.se_beta[0] > 0.0);
    CHECK(fit.params.tau2[0] == Approx(1.1).margin(0.3));
    CHECK(fit.params.tau2[1] == Approx(1.1).margin(0.3));
    t1 += fit.params.tau2[0] / kFits;
    t2 += fit.params.tau2[1] / kFits;
    rho += fit.params.rho_b / kFits;
  }
  CHECK(t1 == Approx(1.1).margin(0.1));
  CHECK(t2 == Approx(1.1).margin(0.1));
  CHECK(rho == Approx(0.5).margin(0.1));
}

TEST_CASE("identical studies sit on the boundary") {
  MetaDataset d;
  for (int i = 0; i < 6; ++i) d.studies.push_back(complete(0.7, 0.3, -0.2, 0.5, 0.1));
  const BrmaFit fit = reml_fit(d);
  CHECK(fit.params.tau2[0] == 0.0);
  CHECK(fit.params.tau2[1] == 0.0);
  CHECK(fit.params.rho_b == 0.0);
  CHECK(fit.at_boundary);
  CHECK(fit.params.beta[0] == Approx(0.7));
}

TEST_CASE("homogeneous data give tau2 = 0") {
  MetaDataset d;
  const double y[] = {0.1, -0.05, 0.02, 0.08, -0.03, 0.0};
  for (double v : y) d.studies.push_back(complete(v, 1.0, -v, 1.0, 0.2));
  const BrmaFit fit = reml_fit(d);
  CHECK(fit.params.tau2[0] < 1e-8);
  CHECK(fit.params.tau2[1] < 1e-8);
}

TEST_CASE("reml_fit error paths") {
  SECTION("outcome reported by a single study") {
    MetaDataset d;
    for (int i = 0; i < 4; ++i) d.studies.push_back(only(0, 0.1 * i, 0.3));
    d.studies.push_back(only(1, 0.5, 0.3));
    CHECK_THROWS_AS(reml_fit(d), DataError);
  }
  SECTION("complete study without rho_w") {
    MetaDataset d;
    for (int i = 0; i < 4; ++i) d.studies.push_back(complete(0.1 * i, 0.3, 0.2, 0.4, 0.0));
    d.studies[2].rho_w.reset();
    CHECK_THROWS_AS(reml_fit(d), DataError);
  }
  SECTION("non-positive se") {
    Study s = only(0, 1.0, 0.0);
    CHECK_THROWS_AS(validate(s), DataError);
  }
  SECTION("invalid parameters") {
    BrmaParams p;
    p.tau2 = {-0.1, 0.2};
    CHECK_THROWS(validate(p));
  }
}

TEST_CASE("gls_beta at zero heterogeneity is the inverse-variance mean") {
  MetaDataset d;
  d.studies.push_back(only(0, 1.0, 1.0));
  d.studies.push_back(only(0, 3.0, 0.5));
  d.studies.push_back(only(1, 2.0, 1.0));
  d.studies.push_back(only(1, 4.0, 1.0));
  std::array<double, 2> se{};
  const auto b = gls_beta(d, BrmaParams{}, &se);
  CHECK(b[0] == Approx((1.0 + 3.0 * 4.0) / 5.0));
  CHECK(b[1] == Approx(3.0));
  CHECK(se[0] == Approx(std::sqrt(1.0 / 5.0)));
}
