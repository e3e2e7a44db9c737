#include <algorithm>
#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"
#include "mvpb/pb_tests.hpp"
#include "support.hpp"

using Catch::Approx;
using namespace mvpb;

namespace {

const EggerOptions kClassical{EggerVariance::kWithinStudy, EggerWeighting::kNone};

UniSeries from_snd(const std::vector<double>& snd, const std::vector<double>& prec) {
  UniSeries s;
  for (std::size_t i = 0; i < snd.size(); ++i) {
    s.se.push_back(1.0 / prec[i]);
    s.y.push_back(snd[i] / prec[i]);
  }
  return s;
}

UniSeries random_series(std::mt19937_64& rng, int m, double tau) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> se(0.1, 1.5);
  UniSeries s;
  for (int i = 0; i < m; ++i) {
    const double si = se(rng);
    s.se.push_back(si);
    s.y.push_back(0.4 + tau * z(rng) + si * z(rng));
  }
  return s;
}

// Symmetric funnel: pairs +-d_k around 0 sharing a standard error.
UniSeries symmetric_funnel() {
  UniSeries s;
  for (int k = 1; k <= 10; ++k) {
    for (double sign : {-1.0, 1.0}) {
      s.y.push_back(sign * 0.15 * k);
      s.se.push_back(0.1 + 0.05 * k);
    }
  }
  return s;
}

double dl_tau2(const UniSeries& s) {
  double sw = 0, sw2 = 0, swy = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double w = 1 / (s.se[i] * s.se[i]);
    sw += w;
    sw2 += w * w;
    swy += w * s.y[i];
  }
  double q = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    q += std::pow(s.y[i] - swy / sw, 2) / (s.se[i] * s.se[i]);
  }
  return std::max(0.0, (q - (s.size() - 1.0)) / (sw - sw2 / sw));
}

}  // namespace

// ---------------------------------------------------------------- Egger

TEST_CASE("Egger: points on a line through the origin") {
  const UniSeries s = from_snd({0.5, 1.0, 1.5, 2.5}, {1.0, 2.0, 3.0, 5.0});
  for (const EggerOptions& o : {kClassical, EggerOptions{}}) {
    const TestResult r = egger_test(s, o);
    CHECK(r.get("intercept") == Approx(0.0).margin(1e-12));
    CHECK(r.p_value == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("Egger: four points against the normal equations") {
  const std::vector<double> snd{1, 2, 3, 5}, prec{1, 2, 3, 4};
  // Normal equations [n sx; sx sxx] (a, b) = (sy, sxy), solved by Cramer.
  double n = 4, sx = 0, sxx = 0, sy = 0, sxy = 0;
  for (int i = 0; i < 4; ++i) {
    sx += prec[i];
    sxx += prec[i] * prec[i];
    sy += snd[i];
    sxy += prec[i] * snd[i];
  }
  const double det = n * sxx - sx * sx;
  const double a = (sy * sxx - sx * sxy) / det;
  const double b = (n * sxy - sx * sy) / det;
  double rss = 0;
  for (int i = 0; i < 4; ++i) rss += std::pow(snd[i] - a - b * prec[i], 2);
  const double se_a = std::sqrt(rss / 2.0 * sxx / det);
  const double t = a / se_a;
  const double p = 1.0 - std::abs(t) / std::sqrt(2.0 + t * t);  // t with 2 df

  const TestResult r = egger_test(from_snd(snd, prec), kClassical);
  CHECK(a == Approx(-0.5));
  CHECK(b == Approx(1.3));
  CHECK(r.get("intercept") == Approx(a).epsilon(1e-12));
  CHECK(r.get("slope") == Approx(b).epsilon(1e-12));
  CHECK(r.get("intercept_se") == Approx(se_a).epsilon(1e-12));
  CHECK(r.statistic == Approx(t).epsilon(1e-12));
  CHECK(*r.df == 2.0);
  CHECK(r.p_value == Approx(p).epsilon(1e-10));
  CHECK(r.p_value == Approx(0.402386).margin(1e-6));
}

TEST_CASE("Egger: random-effects form standardizes by se^2 + tau^2") {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 10; ++k) {
    const UniSeries s = random_series(rng, 15, 0.8);
    const double t2 = dl_tau2(s);
    UniSeries total = s;
    for (auto& se : total.se) se = std::sqrt(se * se + t2);
    const TestResult re = egger_test(s);
    CHECK(re.get("tau2") == Approx(t2).epsilon(1e-12));
    CHECK(re.p_value == Approx(egger_test(total, kClassical).p_value).epsilon(1e-10));
  }
}

TEST_CASE("Egger: p-value invariant under joint rescaling of y and se") {
  std::mt19937_64 rng(4);
  for (const EggerOptions& o :
       {kClassical, EggerOptions{}, EggerOptions{EggerVariance::kRandomEffects, EggerWeighting::kInverseVariance}}) {
    const UniSeries s = random_series(rng, 12, 0.5);
    UniSeries c = s;
    for (auto& v : c.y) v *= 3.7;
    for (auto& v : c.se) v *= 3.7;
    CHECK(egger_test(c, o).p_value == Approx(egger_test(s, o).p_value).epsilon(1e-9));
  }
}

TEST_CASE("Egger: inverse-variance weighting equals OLS on rescaled rows") {
  // Weighting row i by P_i^2 is OLS after multiplying the row by P_i.
  const std::vector<double> snd{0.3, 1.9, 2.2, 4.1, 3.0}, prec{0.8, 1.5, 2.0, 3.1, 4.0};
  const TestResult r = egger_test(from_snd(snd, prec), {EggerVariance::kWithinStudy, EggerWeighting::kInverseVariance});
  // Hand WLS: minimise sum w (snd - a - b p)^2.
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < 5; ++i) {
    const double w = prec[i] * prec[i];
    sw += w;
    sx += w * prec[i];
    sy += w * snd[i];
    sxx += w * prec[i] * prec[i];
    sxy += w * prec[i] * snd[i];
  }
  const double det = sw * sxx - sx * sx;
  CHECK(r.get("intercept") == Approx((sy * sxx - sx * sxy) / det).epsilon(1e-12));
  CHECK(r.get("slope") == Approx((sw * sxy - sx * sy) / det).epsilon(1e-12));
}

TEST_CASE("Egger: degenerate and invalid input") {
  UniSeries s{{0.1, 0.4, -0.2, 0.3}, {0.5, 0.5, 0.5, 0.5}};
  CHECK_THROWS_AS(egger_test(s), DegenerateError);
  CHECK_THROWS_AS(egger_test(UniSeries{{0.1, 0.2}, {0.3, 0.4}}), DataError);
  CHECK_THROWS_AS(egger_test(UniSeries{{0.1, 0.2, 0.3}, {0.3, -0.4, 0.2}}), DataError);
}

// ---------------------------------------------------------------- Kendall / Begg

TEST_CASE("Kendall tau: concordance counts") {
  const std::vector<double> x{1, 2, 3};
  CHECK(kendall_tau(x, std::vector<double>{4, 5, 6}).tau == 1.0);
  const KendallResult k = kendall_tau(x, std::vector<double>{1, 3, 2});
  CHECK(k.concordant == 2);
  CHECK(k.discordant == 1);
  CHECK(k.tau == Approx(1.0 / 3.0));
  CHECK(kendall_tau(x, std::vector<double>{3, 2, 1}).tau == -1.0);
}

TEST_CASE("Kendall tau: null variance without ties") {
  std::vector<double> x, y;
  for (int i = 0; i < 9; ++i) {
    x.push_back(i);
    y.push_back((i * 5) % 9);
  }
  const KendallResult k = kendall_tau(x, y);
  const double n = 9;
  CHECK(k.var_s == Approx(n * (n - 1) * (2 * n + 5) / 18.0));
  // z from S equals z from tau with the textbook variance of tau.
  const double z_tau = k.tau / std::sqrt(2 * (2 * n + 5) / (9 * n * (n - 1)));
  CHECK(k.s / std::sqrt(k.var_s) == Approx(z_tau));
}

TEST_CASE("Kendall tau-b with ties against pair enumeration") {
  const std::vector<double> x{1, 1, 2, 3, 3, 3, 4}, y{2, 1, 1, 5, 4, 4, 6};
  double s = 0, tx = 0, ty = 0, n0 = 21;
  for (int i = 0; i < 7; ++i) {
    for (int j = i + 1; j < 7; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      s += ((dx > 0) - (dx < 0)) * ((dy > 0) - (dy < 0));
      tx += dx == 0;
      ty += dy == 0;
    }
  }
  const KendallResult k = kendall_tau(x, y);
  CHECK(k.s == s);
  CHECK(k.tau == Approx(s / std::sqrt((n0 - tx) * (n0 - ty))));
}

TEST_CASE("Begg: deviates increasing with variance give tau = 1") {
  UniSeries s;
  for (int i = 1; i <= 8; ++i) {
    s.se.push_back(0.1 * i);
    s.y.push_back(2.0 * i);
  }
  const TestResult r = begg_test(s);
  CHECK(r.get("kendall_tau") == Approx(1.0));
  CHECK(r.p_value < 0.01);
}

TEST_CASE("Begg: reflecting y about the weighted mean flips tau") {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 10; ++k) {
    const UniSeries s = random_series(rng, 14, 0.4);
    const TestResult r = begg_test(s);
    const double mean = r.get("pooled_mean");
    UniSeries m = s;
    for (auto& v : m.y) v = 2 * mean - v;
    const TestResult rm = begg_test(m);
    CHECK(rm.get("kendall_tau") == Approx(-r.get("kendall_tau")).margin(1e-12));
    CHECK(std::abs(r.get("kendall_tau")) <= 1.0);
    CHECK(rm.p_value == Approx(r.p_value));
  }
}

TEST_CASE("Begg: equal variances are degenerate") {
  CHECK_THROWS_AS(begg_test(UniSeries{{0.1, 0.4, -0.2}, {0.5, 0.5, 0.5}}), DegenerateError);
}

// ---------------------------------------------------------------- trim and fill

TEST_CASE("DerSimonian-Laird against the moment formula") {
  const UniSeries s{{0.2, 1.4, -0.5, 0.9, 0.1}, {0.3, 0.5, 0.4, 0.6, 0.2}};
  const PooledEstimate p = dersimonian_laird(s.y, s.se);
  const double t2 = dl_tau2(s);
  CHECK(p.tau2 == Approx(t2));
  double w = 0, wy = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    w += 1 / (s.se[i] * s.se[i] + t2);
    wy += s.y[i] / (s.se[i] * s.se[i] + t2);
  }
  CHECK(p.mean == Approx(wy / w));
  CHECK(p.se == Approx(std::sqrt(1 / w)));
}

TEST_CASE("Trim-and-fill: symmetric funnel") {
  for (auto est : {TrimFillEstimator::kL0, TrimFillEstimator::kR0}) {
    for (auto side : {TrimFillSide::kLeft, TrimFillSide::kRight, TrimFillSide::kAuto}) {
      TrimFillOptions o;
      o.estimator = est;
      o.side = side;
      const TestResult r = trim_fill(symmetric_funnel(), o);
      CHECK(r.get("k0") == 0.0);
      CHECK(r.p_value >= 0.5);
    }
  }
}

TEST_CASE("Trim-and-fill: three deleted extremes of a paired funnel") {
  UniSeries s = symmetric_funnel();
  UniSeries cut;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.y[i] < -0.15 * 7.5) continue;
    cut.y.push_back(s.y[i]);
    cut.se.push_back(s.se[i]);
  }
  REQUIRE(cut.size() == 17);
  UniSeries filled;
  const TestResult r = trim_fill(cut, {}, &filled);
  // With two studies trimmed the center sits slightly right of 0, so in
  // each of the 7 intact pairs the positive member takes the lower rank:
  // Sr = (1 + 3 + ... + 13) + (15 + 16 + 17) = 97 and
  // L0 = (4 * 97 - 17 * 18) / 33 = 82 / 33, which rounds to 2.
  CHECK(r.get("estimate") == Approx(82.0 / 33.0));
  CHECK(r.get("k0") == 2.0);
  CHECK(r.get("side") == -1.0);
  CHECK(r.get("trimmed_center") > 0.0);
  REQUIRE(filled.size() == 19);
  const double c = r.get("trimmed_center");
  for (std::size_t i = 17; i < 19; ++i) {
    CHECK(filled.y[i] < c);
    CHECK(2 * c - filled.y[i] > 0.15 * 8.5);
  }
  CHECK(r.get("mean_filled") < r.get("mean_original"));
}

TEST_CASE("Trim-and-fill: mirrored input is handled on the right") {
  UniSeries cut;
  for (std::size_t i = 0; i < symmetric_funnel().size(); ++i) {
    const double y = symmetric_funnel().y[i];
    if (y > 0.15 * 7.5) continue;
    cut.y.push_back(y);
    cut.se.push_back(symmetric_funnel().se[i]);
  }
  const TestResult r = trim_fill(cut);
  CHECK(r.get("k0") == 2.0);
  CHECK(r.get("side") == 1.0);
}

TEST_CASE("Trim-and-fill: p-value forms") {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 20; ++k) {
    const UniSeries s = random_series(rng, 25, 0.6);
    TrimFillOptions o;
    const TestResult r = trim_fill(s, o);
    CHECK(r.get("k0") >= 0.0);
    CHECK(r.get("k0") <= 24.0);
    CHECK(r.p_value == Approx(std::pow(0.5, r.get("k0_test") + 1.0)));
    o.test_estimator = TrimFillEstimator::kL0;
    const TestResult l = trim_fill(s, o);
    const double kd = 25.0;
    const double sd = std::sqrt(16 * kd * (kd + 1) * (2 * kd + 1) / 24.0) / (2 * kd - 1);
    const double k0 = l.get("k0_test");
    const double z = (k0 - 0.5) / sd;
    CHECK(l.p_value == Approx(k0 == 0 ? 1.0 : 0.5 * std::erfc(z / std::sqrt(2.0))));
  }
}

// ---------------------------------------------------------------- adapters

TEST_CASE("combine_logdor examples") {
  MetaDataset d;
  Study a;
  a.id = "a";
  a.y = {0.0, 0.0};
  a.se = {1.0, 1.0};
  a.rho_w = 0.0;
  Study b;
  b.id = "b";
  b.y = {1.2, 0.8};
  b.se = {0.3, 0.4};
  b.rho_w = -0.5;
  Study p;
  p.id = "p";
  p.y[0] = 1.0;
  p.se[0] = 0.2;
  d.studies = {a, b, p};
  std::size_t dropped = 0;
  const UniSeries c = combine_logdor(d, &dropped);
  REQUIRE(c.size() == 2);
  CHECK(c.y[0] == 0.0);
  CHECK(c.se[0] == Approx(std::sqrt(2.0)));
  CHECK(c.y[1] == Approx(2.0));
  CHECK(c.se[1] == Approx(std::sqrt(0.13)));
  CHECK(dropped == 1);

  d.studies[1].rho_w.reset();
  CHECK_THROWS_AS(combine_logdor(d), DataError);
  d.studies[1].rho_w = -0.5;
  d.scale = "raw";
  CHECK_THROWS_AS(combine_logdor(d), DataError);
}

TEST_CASE("bonferroni_combine") {
  TestResult r1, r2;
  r1.p_value = 0.04;
  r1.statistic = 2.1;
  r2.p_value = 0.50;
  r2.statistic = 0.7;
  const TestResult b = bonferroni_combine(r1, r2);
  CHECK(b.p_value == Approx(0.08));
  CHECK(b.statistic == 2.1);
  r1.p_value = r2.p_value = 0.9;
  CHECK(bonferroni_combine(r1, r2).p_value == 1.0);
  r1.p_value = 0.3;
  CHECK(bonferroni_combine(r1, r1).p_value == Approx(0.6));
}
