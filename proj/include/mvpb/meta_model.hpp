#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mvpb/error.hpp"

// Bivariate random-effects meta-analysis (BRMA): study records, marginal
// covariances and REML estimation of the between-study parameters.

namespace mvpb {

inline constexpr std::size_t kOutcomes = 2;

/// Up-to-2x2 matrix with inline storage; sized to the observed outcomes.
using SmallMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 2, 2>;
using SmallVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 2, 1>;

/// One study's summary data. An outcome slot is absent when `y[j]` is empty;
/// `se[j]` must be empty exactly where `y[j]` is.
struct Study {
  std::string id;
  std::array<std::optional<double>, kOutcomes> y;
  std::array<std::optional<double>, kOutcomes> se;
  std::optional<double> rho_w;

  bool has(std::size_t j) const { return y[j].has_value(); }
  bool complete() const { return has(0) && has(1); }
  std::size_t observed_count() const { return std::size_t{has(0)} + has(1); }
  /// Outcome indices observed, in order.
  std::vector<std::size_t> observed() const;

  friend bool operator==(const Study&, const Study&) = default;
};

/// Throws DataError naming the study and the violated rule.
void validate(const Study& study);

struct MetaDataset {
  std::vector<Study> studies;
  std::array<std::string, kOutcomes> outcome_names{"outcome1", "outcome2"};
  /// Free-form declaration of the effect scale ("logit", "raw", ...); empty
  /// when not declared.
  std::string scale;

  std::size_t size() const { return studies.size(); }
  std::size_t complete_count() const;
  std::size_t partial_count() const { return size() - complete_count(); }
  /// Number of studies reporting outcome j.
  std::size_t outcome_count(std::size_t j) const;

  friend bool operator==(const MetaDataset&, const MetaDataset&) = default;
};

void validate(const MetaDataset& data);

struct BrmaParams {
  std::array<double, kOutcomes> beta{0.0, 0.0};
  std::array<double, kOutcomes> tau2{0.0, 0.0};
  double rho_b = 0.0;

  /// Between-study covariance Omega.
  Eigen::Matrix2d omega() const;
};

void validate(const BrmaParams& params);

/// V_i = Delta_i + Omega restricted to the outcomes the study reports.
/// Throws DegenerateError if the result is not positive definite.
SmallMatrix marginal_cov(const Study& study, const BrmaParams& params);

struct FitOptions {
  int max_iterations = 500;
  double loglik_tolerance = 1e-10;
  double param_tolerance = 1e-8;
  double gradient_tolerance = 1e-6;
  /// |rho_B| is kept strictly inside this bound.
  double rho_bound = 0.999;
};

struct BrmaFit {
  BrmaParams params;
  double loglik_restricted = 0.0;
  bool converged = false;
  int iterations = 0;
  std::array<double, kOutcomes> se_beta{0.0, 0.0};
  double gradient_norm = 0.0;
  /// Some variance component ended on its boundary (tau2 = 0 or |rho_B| at
  /// the bound), or the data were degenerate.
  bool at_boundary = false;
  /// Outcomes that appear in at least one study; the others carry fixed
  /// zero parameters.
  std::array<bool, kOutcomes> outcome_active{true, true};
};

/// Thrown by reml_fit when the optimizer exhausts its iteration budget.
class RemlConvergenceError : public ConvergenceError {
 public:
  RemlConvergenceError(const std::string& what, BrmaFit last)
      : ConvergenceError(what), last_(std::move(last)) {}

  const BrmaFit& last_iterate() const noexcept { return last_; }

 private:
  BrmaFit last_;
};

/// Restricted log-likelihood of the dataset at the given variance
/// components; beta is profiled out by GLS so params.beta is ignored.
double restricted_loglik(const MetaDataset& data, const BrmaParams& params);

/// REML fit of (beta, tau2, rho_B). Partially reported studies enter
/// through their univariate marginal. Throws DataError when an outcome is
/// reported by fewer than two studies (outcomes reported by none are
/// dropped) and ConvergenceError (carrying the last iterate) when the
/// optimizer runs out of iterations.
BrmaFit reml_fit(const MetaDataset& data, const FitOptions& opts = {});

/// Generalised least squares estimate of beta at fixed variance components.
/// Returns beta and fills `se_beta` when non-null.
std::array<double, kOutcomes> gls_beta(const MetaDataset& data, const BrmaParams& params,
                                      std::array<double, kOutcomes>* se_beta = nullptr);

}  // namespace mvpb
