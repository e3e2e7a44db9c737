#include "mvpb/rst.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "mvpb/distributions.hpp"
#include "mvpb/error.hpp"

namespace mvpb {

RstDesign build_design(const MetaDataset& data, const BrmaParams& params) {
  validate(data);
  validate(params);
  RstDesign design;
  for (std::size_t j = 0; j < kOutcomes; ++j) design.outcome_active[j] = data.outcome_count(j) > 0;
  const std::array<double, kOutcomes> tau{std::sqrt(params.tau2[0]), std::sqrt(params.tau2[1])};
  for (const auto& s : data.studies) {
    RstRow row;
    row.pattern = s.observed();
    const auto k = static_cast<Eigen::Index>(row.pattern.size());
    row.snd.resize(k);
    row.precision.resize(k);
    row.sigma = SmallMatrix::Identity(k, k);
    std::array<double, kOutcomes> sd{};
    for (Eigen::Index c = 0; c < k; ++c) {
      const std::size_t j = row.pattern[c];
      sd[c] = std::sqrt(*s.se[j] * *s.se[j] + params.tau2[j]);
      row.precision[c] = 1.0 / sd[c];
      row.snd[c] = *s.y[j] / sd[c];
    }
    if (k == 2) {
      if (!s.rho_w) {
        throw DataError("study '" + s.id + "' reports both outcomes but has no within-study correlation");
      }
      const double r = (*s.rho_w * *s.se[0] * *s.se[1] + params.rho_b * tau[0] * tau[1]) / (sd[0] * sd[1]);
      if (!(std::abs(r) < 1.0)) {
        throw DegenerateError("study '" + s.id + "': error correlation is on the boundary |r| >= 1");
      }
      row.sigma(0, 1) = row.sigma(1, 0) = r;
    }
    design.rows.push_back(std::move(row));
  }
  return design;
}

RstDesign build_design(const MetaDataset& data, const BrmaFit& fit) {
  return build_design(data, fit.params);
}

RstDesign restrict_to_outcome(const RstDesign& design, std::size_t j) {
  RstDesign out;
  out.outcome_active = {false, false};
  out.outcome_active[j] = design.outcome_active[j];
  for (const auto& row : design.rows) {
    for (std::size_t c = 0; c < row.pattern.size(); ++c) {
      if (row.pattern[c] != j) continue;
      RstRow r;
      r.pattern = {j};
      r.snd = SmallVector::Constant(1, row.snd[c]);
      r.precision = SmallVector::Constant(1, row.precision[c]);
      r.sigma = SmallMatrix::Identity(1, 1);
      out.rows.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

// Position of a_j in the packed (a..., b...) vector; b_j sits q further on.
struct Packing {
  std::array<int, kOutcomes> index{-1, -1};
  int q = 0;

  explicit Packing(const RstDesign& d) {
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      if (d.outcome_active[j]) index[j] = q++;
    }
  }
  int a(std::size_t j) const { return index[j]; }
  int b(std::size_t j) const { return q + index[j]; }
};

SmallMatrix weight(const RstRow& row, RstObjective objective) {
  const auto k = row.sigma.rows();
  if (objective == RstObjective::kIndependent) return SmallMatrix::Identity(k, k);
  if (k == 1) return SmallMatrix::Constant(1, 1, 1.0 / row.sigma(0, 0));
  const double det = row.sigma(0, 0) * row.sigma(1, 1) - row.sigma(0, 1) * row.sigma(1, 0);
  SmallMatrix w(2, 2);
  w << row.sigma(1, 1) / det, -row.sigma(0, 1) / det, -row.sigma(1, 0) / det, row.sigma(0, 0) / det;
  return w;
}

SmallVector residual(const RstRow& row, const RstParams& theta) {
  SmallVector r(row.snd.size());
  for (Eigen::Index c = 0; c < r.size(); ++c) {
    const std::size_t j = row.pattern[c];
    r[c] = row.snd[c] - theta.a[j] - theta.b[j] * row.precision[c];
  }
  return r;
}

// Row-wise design D_i mapping the packed parameters to the row's mean.
Eigen::MatrixXd row_design(const RstRow& row, const Packing& pk) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(row.pattern.size()), 2 * pk.q);
  for (std::size_t c = 0; c < row.pattern.size(); ++c) {
    const std::size_t j = row.pattern[c];
    d(static_cast<Eigen::Index>(c), pk.a(j)) = 1.0;
    d(static_cast<Eigen::Index>(c), pk.b(j)) = row.precision[static_cast<Eigen::Index>(c)];
  }
  return d;
}

}  // namespace

double rst_loglik(const RstDesign& design, const RstParams& theta, RstObjective objective) {
  double ll = 0.0;
  for (const auto& row : design.rows) {
    const SmallVector r = residual(row, theta);
    ll -= 0.5 * r.dot(weight(row, objective) * r);
  }
  return ll;
}

Eigen::VectorXd rst_score(const RstDesign& design, const RstParams& theta, RstObjective objective) {
  const Packing pk(design);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(2 * pk.q);
  for (const auto& row : design.rows) {
    const Eigen::VectorXd wr = weight(row, objective) * residual(row, theta);
    u += row_design(row, pk).transpose() * wr;
  }
  return u;
}

Eigen::MatrixXd rst_neg_hessian(const RstDesign& design, RstObjective objective) {
  const Packing pk(design);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2 * pk.q, 2 * pk.q);
  for (const auto& row : design.rows) {
    const Eigen::MatrixXd d = row_design(row, pk);
    const Eigen::MatrixXd w = weight(row, objective);
    h += d.transpose() * w * d;
  }
  return h;
}

std::array<double, kOutcomes> profile_b(const RstDesign& design, RstObjective objective) {
  const Packing pk(design);
  if (pk.q == 0) throw DegenerateError("RST design has no observed outcomes");
  // Each active outcome needs two distinct precisions for (a, b) to be
  // separable.
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (!design.outcome_active[j]) continue;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t count = 0;
    for (const auto& row : design.rows) {
      for (std::size_t c = 0; c < row.pattern.size(); ++c) {
        if (row.pattern[c] != j) continue;
        lo = std::min(lo, row.precision[static_cast<Eigen::Index>(c)]);
        hi = std::max(hi, row.precision[static_cast<Eigen::Index>(c)]);
        ++count;
      }
    }
    if (count < 2 || !(hi - lo > 1e-12 * hi)) {
      throw DegenerateError("RST design: outcome " + std::to_string(j + 1) +
                            " has constant precision, slope and intercept are not separable");
    }
  }
  const Eigen::MatrixXd h = rst_neg_hessian(design, objective);
  const Eigen::VectorXd g = rst_score(design, RstParams{}, objective);
  const Eigen::MatrixXd hbb = h.bottomRightCorner(pk.q, pk.q);
  const Eigen::VectorXd b = hbb.ldlt().solve(g.tail(pk.q));
  std::array<double, kOutcomes> out{0.0, 0.0};
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (design.outcome_active[j]) out[j] = b[pk.index[j]];
  }
  return out;
}

RstParams rst_joint_fit(const RstDesign& design, RstObjective objective) {
  const Packing pk(design);
  const Eigen::MatrixXd h = rst_neg_hessian(design, objective);
  const Eigen::VectorXd g = rst_score(design, RstParams{}, objective);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(h);
  if (!lu.isInvertible()) throw DegenerateError("RST information matrix is singular");
  const Eigen::VectorXd theta = lu.solve(g);
  RstParams out;
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (!design.outcome_active[j]) continue;
    out.a[j] = theta[pk.a(j)];
    out.b[j] = theta[pk.b(j)];
  }
  return out;
}

RstResult rst_statistic(const RstDesign& design, const RstOptions& opts) {
  const Packing pk(design);
  RstResult res;
  res.b_profiled = profile_b(design, opts.objective);
  RstParams null_theta;
  null_theta.b = res.b_profiled;
  const Eigen::VectorXd u = rst_score(design, null_theta, opts.objective);
  const Eigen::MatrixXd h = rst_neg_hessian(design, opts.objective);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h);
  const double lmax = eig.eigenvalues().maxCoeff();
  if (!(eig.eigenvalues().minCoeff() > 1e-12 * lmax)) {
    throw DegenerateError("RST information matrix is singular");
  }
  const Eigen::MatrixXd h_inv = eig.eigenvectors() *
                                eig.eigenvalues().cwiseInverse().asDiagonal() *
                                eig.eigenvectors().transpose();
  const double m = static_cast<double>(design.size());
  res.studies = design.size();
  res.score_at_null = u.head(pk.q);
  // I0^aa block of the inverse information; the averaged convention scales
  // the information by 1/m, cancelling the leading 1/m of the statistic.
  res.info_aa = h_inv.topLeftCorner(pk.q, pk.q);
  if (opts.scaling == InformationScaling::kAveraged) res.info_aa *= m;
  res.statistic = res.score_at_null.dot(res.info_aa * res.score_at_null) / m;
  res.statistic = std::max(0.0, res.statistic);
  res.df = pk.q;
  res.p_value = dist::chi_squared_upper(res.statistic, res.df);
  return res;
}

RstResult rst_test(const MetaDataset& data, const RstOptions& opts) {
  const BrmaFit fit = reml_fit(data, opts.fit);
  const RstDesign design = build_design(data, fit);
  RstResult res = rst_statistic(design, opts);
  res.plug_in = fit.params;
  return res;
}

}  // namespace mvpb
