#pragma once

#include <span>

// Thin wrappers over Boost.Math for the reference distributions used by the
// tests, plus a Kolmogorov-Smirnov goodness-of-fit check.

namespace mvpb::dist {

/// Two-sided p-value for a t statistic with `df` degrees of freedom.
double student_t_two_sided(double t, double df);

/// Two-sided p-value for a standard normal z.
double normal_two_sided(double z);

/// Upper tail P(Z >= z) of the standard normal.
double normal_upper(double z);

double normal_cdf(double z);

/// Upper tail P(X >= x) of a chi-squared variable.
double chi_squared_upper(double x, double df);

double chi_squared_cdf(double x, double df);

double logistic(double x);

struct KsResult {
  double statistic = 0.0;  ///< sup |F_n - F|
  double p_value = 1.0;    ///< asymptotic Kolmogorov tail probability
};

/// One-sample KS test of `sample` against the chi-squared(df) CDF.
KsResult ks_test_chi_squared(std::span<const double> sample, double df);

/// Asymptotic Kolmogorov survival function Q(lambda) = P(K > lambda).
double kolmogorov_survival(double lambda);

}  // namespace mvpb::dist
