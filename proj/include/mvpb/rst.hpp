#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "mvpb/meta_model.hpp"

// Regression-based score test (RST) for funnel asymmetry across two
// correlated outcomes: each outcome's standardized deviate is regressed on
// its precision, SND_i = a + b P_i + e_i with e_i ~ N(0, Sigma_i), and the
// intercepts a are tested jointly with a score statistic at a = 0.

namespace mvpb {

/// One study's row of the regression. Only observed outcomes appear.
struct RstRow {
  std::vector<std::size_t> pattern;  ///< observed outcome indices
  SmallVector snd;
  SmallVector precision;
  SmallMatrix sigma;  ///< correlation matrix of the standardized errors
};

struct RstDesign {
  std::vector<RstRow> rows;
  std::array<bool, kOutcomes> outcome_active{true, true};

  std::size_t size() const { return rows.size(); }
  /// Number of outcomes with at least one observation.
  std::size_t active_count() const { return std::size_t{outcome_active[0]} + outcome_active[1]; }
};

/// SND_ij = Y_ij / sqrt(s_ij^2 + tau_j^2), P_ij = 1 / sqrt(s_ij^2 + tau_j^2)
/// and the implied error correlation, all with the given plug-in parameters.
/// Throws DegenerateError if some Sigma_i is not positive definite.
RstDesign build_design(const MetaDataset& data, const BrmaParams& params);
RstDesign build_design(const MetaDataset& data, const BrmaFit& fit);

/// Keeps only outcome j of every study (studies without it are dropped).
RstDesign restrict_to_outcome(const RstDesign& design, std::size_t j);

enum class RstObjective {
  kCorrelated,   ///< Gaussian log-likelihood with covariance Sigma_i
  kIndependent,  ///< Sigma_i replaced by the identity (plain sum of squares)
};

enum class InformationScaling {
  kAveraged,  ///< I0 = H / m, so RST = U' [H^-1]_aa U
  kTotal,     ///< I0 = H, so RST = U' [H^-1]_aa U / m
};

struct RstOptions {
  RstObjective objective = RstObjective::kCorrelated;
  InformationScaling scaling = InformationScaling::kAveraged;
  FitOptions fit;
};

/// Regression parameters packed as (a_1..a_q, b_1..b_q) over active outcomes.
struct RstParams {
  std::array<double, kOutcomes> a{0.0, 0.0};
  std::array<double, kOutcomes> b{0.0, 0.0};
};

/// log L(a, b) = -1/2 sum_i r_i' W_i r_i with r_i = SND_i - a - b P_i and
/// W_i = Sigma_i^-1 (correlated) or I (independent).
double rst_loglik(const RstDesign& design, const RstParams& theta, RstObjective objective);

/// Gradient of rst_loglik in the packed (a, b) order over active outcomes.
Eigen::VectorXd rst_score(const RstDesign& design, const RstParams& theta, RstObjective objective);

/// Negative Hessian of rst_loglik (constant in theta), packed as rst_score.
Eigen::MatrixXd rst_neg_hessian(const RstDesign& design, RstObjective objective);

/// Maximiser of rst_loglik over b with a fixed at 0. Throws DegenerateError
/// when an active outcome has constant precision or too few observations.
std::array<double, kOutcomes> profile_b(const RstDesign& design,
                                        RstObjective objective = RstObjective::kCorrelated);

/// Unconstrained maximiser of rst_loglik.
RstParams rst_joint_fit(const RstDesign& design, RstObjective objective = RstObjective::kCorrelated);

struct RstResult {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::array<double, kOutcomes> b_profiled{0.0, 0.0};
  Eigen::VectorXd score_at_null;  ///< U_a at (0, b~(0)), over active outcomes
  Eigen::MatrixXd info_aa;        ///< [I0^-1]_aa block
  std::size_t studies = 0;
  BrmaParams plug_in;
};

/// Score statistic on a prepared design. Throws DegenerateError when the
/// information matrix is singular.
RstResult rst_statistic(const RstDesign& design, const RstOptions& opts = {});

/// Full pipeline: REML fit, design, profiled slope and chi-squared score test.
RstResult rst_test(const MetaDataset& data, const RstOptions& opts = {});

}  // namespace mvpb
