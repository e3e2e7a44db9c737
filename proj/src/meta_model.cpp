#include "mvpb/meta_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "bfgs.hpp"

namespace mvpb {

std::vector<std::size_t> Study::observed() const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (has(j)) out.push_back(j);
  }
  return out;
}

void validate(const Study& study) {
  auto fail = [&](const std::string& rule) {
    throw DataError("study '" + study.id + "': " + rule);
  };
  if (study.observed_count() == 0) fail("no outcome reported");
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (study.y[j].has_value() != study.se[j].has_value()) {
      fail("effect and standard error must be both present or both absent for outcome " +
           std::to_string(j + 1));
    }
    if (study.has(j)) {
      if (!std::isfinite(*study.y[j])) fail("non-finite effect size");
      if (!(*study.se[j] > 0.0) || !std::isfinite(*study.se[j])) {
        fail("standard error must be positive for outcome " + std::to_string(j + 1));
      }
    }
  }
  if (study.rho_w && !(*study.rho_w >= -1.0 && *study.rho_w <= 1.0)) {
    fail("within-study correlation outside [-1, 1]");
  }
}

std::size_t MetaDataset::complete_count() const {
  return static_cast<std::size_t>(
      std::count_if(studies.begin(), studies.end(), [](const Study& s) { return s.complete(); }));
}

std::size_t MetaDataset::outcome_count(std::size_t j) const {
  return static_cast<std::size_t>(
      std::count_if(studies.begin(), studies.end(), [j](const Study& s) { return s.has(j); }));
}

void validate(const MetaDataset& data) {
  if (data.studies.empty()) throw DataError("dataset has no studies");
  for (const auto& s : data.studies) validate(s);
}

Eigen::Matrix2d BrmaParams::omega() const {
  const double t1 = std::sqrt(tau2[0]);
  const double t2 = std::sqrt(tau2[1]);
  Eigen::Matrix2d m;
  m << tau2[0], t1 * t2 * rho_b, t1 * t2 * rho_b, tau2[1];
  return m;
}

void validate(const BrmaParams& params) {
  for (double t : params.tau2) {
    if (!(t >= 0.0) || !std::isfinite(t)) throw DataError("between-study variance must be >= 0");
  }
  if (!(params.rho_b >= -1.0 && params.rho_b <= 1.0)) {
    throw DataError("between-study correlation outside [-1, 1]");
  }
}

namespace {

// Within-study covariance Delta_i + between-study covariance for a study,
// given tau (possibly signed) and rho_b directly.
SmallMatrix study_cov(const Study& s, const std::vector<std::size_t>& obs,
                      const std::array<double, kOutcomes>& tau, double rho_b) {
  const auto k = static_cast<Eigen::Index>(obs.size());
  SmallMatrix v(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      const std::size_t ja = obs[a], jb = obs[b];
      if (a == b) {
        v(a, b) = *s.se[ja] * *s.se[ja] + tau[ja] * tau[ja];
      } else {
        v(a, b) = *s.se[ja] * *s.se[jb] * s.rho_w.value_or(0.0) + tau[ja] * tau[jb] * rho_b;
      }
    }
  }
  return v;
}

bool invert_pd(const SmallMatrix& v, SmallMatrix& inv, double& logdet) {
  if (v.rows() == 1) {
    if (!(v(0, 0) > 0.0)) return false;
    inv.resize(1, 1);
    inv(0, 0) = 1.0 / v(0, 0);
    logdet = std::log(v(0, 0));
    return true;
  }
  const double det = v(0, 0) * v(1, 1) - v(0, 1) * v(1, 0);
  if (!(v(0, 0) > 0.0) || !(det > 1e-300)) return false;
  inv.resize(2, 2);
  inv << v(1, 1) / det, -v(0, 1) / det, -v(1, 0) / det, v(0, 0) / det;
  logdet = std::log(det);
  return true;
}

// Free variance-component parameters: signed tau per active outcome and a
// tanh-transformed correlation when at least one study reports both.
struct Layout {
  std::array<int, kOutcomes> tau_index{-1, -1};
  int z_index = -1;
  int size = 0;
};

class RemlObjective {
 public:
  RemlObjective(const MetaDataset& data, std::array<bool, kOutcomes> active, double rho_bound)
      : data_(data), active_(active), rho_bound_(rho_bound) {
    int col = 0;
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      column_[j] = active_[j] ? col++ : -1;
    }
    p_ = col;
    for (const auto& s : data_.studies) {
      observed_.push_back(s.observed());
      n_obs_ += static_cast<int>(s.observed_count());
    }
    int idx = 0;
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      if (active_[j]) layout_.tau_index[j] = idx++;
    }
    if (active_[0] && active_[1] && data_.complete_count() > 0) layout_.z_index = idx++;
    layout_.size = idx;
  }

  const Layout& layout() const { return layout_; }
  int fixed_effects() const { return p_; }

  double rho_from(double z) const { return rho_bound_ * std::tanh(z); }

  void unpack(const Eigen::VectorXd& x, std::array<double, kOutcomes>& tau, double& rho) const {
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      tau[j] = layout_.tau_index[j] >= 0 ? x[layout_.tau_index[j]] : 0.0;
    }
    rho = layout_.z_index >= 0 ? rho_from(x[layout_.z_index]) : 0.0;
  }

  // Restricted log-likelihood and its gradient with respect to x. Returns
  // -inf when some marginal covariance is not positive definite.
  double evaluate(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
    std::array<double, kOutcomes> tau{};
    double rho = 0.0;
    unpack(x, tau, rho);
    return evaluate_at(tau, rho, grad, nullptr, nullptr, x);
  }

  double evaluate_at(const std::array<double, kOutcomes>& tau, double rho, Eigen::VectorXd* grad,
                     Eigen::VectorXd* beta_out, Eigen::MatrixXd* beta_cov,
                     const Eigen::VectorXd& x = {}) const {
    const std::size_t m = data_.studies.size();
    std::vector<SmallMatrix> vinv(m);
    double logdet_sum = 0.0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p_, p_);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p_);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& s = data_.studies[i];
      const auto& obs = observed_[i];
      double logdet = 0.0;
      if (!invert_pd(study_cov(s, obs, tau, rho), vinv[i], logdet)) {
        return -std::numeric_limits<double>::infinity();
      }
      logdet_sum += logdet;
      for (std::size_t r = 0; r < obs.size(); ++r) {
        const int cr = column_[obs[r]];
        for (std::size_t c = 0; c < obs.size(); ++c) {
          const int cc = column_[obs[c]];
          a(cr, cc) += vinv[i](r, c);
          rhs[cr] += vinv[i](r, c) * *s.y[obs[c]];
        }
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
      return -std::numeric_limits<double>::infinity();
    }
    const Eigen::VectorXd beta = ldlt.solve(rhs);
    const Eigen::MatrixXd a_inv = ldlt.solve(Eigen::MatrixXd::Identity(p_, p_));
    const double logdet_a = ldlt.vectorD().array().log().sum();

    double quad = 0.0;
    std::vector<SmallVector> rt(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& s = data_.studies[i];
      const auto& obs = observed_[i];
      SmallVector r(static_cast<Eigen::Index>(obs.size()));
      for (std::size_t k = 0; k < obs.size(); ++k) r[k] = *s.y[obs[k]] - beta[column_[obs[k]]];
      rt[i] = vinv[i] * r;
      quad += r.dot(rt[i]);
    }
    const double ll = -0.5 * (logdet_sum + logdet_a + quad +
                              (n_obs_ - p_) * std::log(2.0 * std::numbers::pi));
    if (beta_out) *beta_out = beta;
    if (beta_cov) *beta_cov = a_inv;

    if (grad) {
      grad->setZero(layout_.size);
      for (int k = 0; k < layout_.size; ++k) {
        double tr_v = 0.0, quad_k = 0.0;
        Eigen::MatrixXd xdx = Eigen::MatrixXd::Zero(p_, p_);
        for (std::size_t i = 0; i < m; ++i) {
          const auto& obs = observed_[i];
          const SmallMatrix dv = omega_derivative(k, obs, tau, rho, x);
          if (dv.isZero(0.0)) continue;
          tr_v += (vinv[i] * dv).trace();
          quad_k += rt[i].dot(dv * rt[i]);
          const SmallMatrix w = vinv[i] * dv * vinv[i];
          for (std::size_t r = 0; r < obs.size(); ++r) {
            for (std::size_t c = 0; c < obs.size(); ++c) {
              xdx(column_[obs[r]], column_[obs[c]]) += w(r, c);
            }
          }
        }
        const double tr_a = (a_inv * xdx).trace();
        (*grad)[k] = -0.5 * (tr_v - tr_a - quad_k);
      }
    }
    return ll;
  }

 private:
  SmallMatrix omega_derivative(int k, const std::vector<std::size_t>& obs,
                               const std::array<double, kOutcomes>& tau, double rho,
                               const Eigen::VectorXd& x) const {
    Eigen::Matrix2d d = Eigen::Matrix2d::Zero();
    if (k == layout_.tau_index[0]) {
      d << 2.0 * tau[0], tau[1] * rho, tau[1] * rho, 0.0;
    } else if (k == layout_.tau_index[1]) {
      d << 0.0, tau[0] * rho, tau[0] * rho, 2.0 * tau[1];
    } else if (k == layout_.z_index) {
      const double th = std::tanh(x[layout_.z_index]);
      const double drho = rho_bound_ * (1.0 - th * th);
      d << 0.0, tau[0] * tau[1] * drho, tau[0] * tau[1] * drho, 0.0;
    }
    const auto n = static_cast<Eigen::Index>(obs.size());
    SmallMatrix out(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
      for (Eigen::Index b = 0; b < n; ++b) out(a, b) = d(obs[a], obs[b]);
    }
    return out;
  }

  const MetaDataset& data_;
  std::array<bool, kOutcomes> active_;
  double rho_bound_;
  std::array<int, kOutcomes> column_{-1, -1};
  int p_ = 0;
  int n_obs_ = 0;
  std::vector<std::vector<std::size_t>> observed_;
  Layout layout_;
};

std::array<bool, kOutcomes> active_outcomes(const MetaDataset& data) {
  std::array<bool, kOutcomes> active{};
  for (std::size_t j = 0; j < kOutcomes; ++j) active[j] = data.outcome_count(j) > 0;
  return active;
}

// DerSimonian-Laird moment estimate of tau^2 for one outcome.
double moment_tau2(const MetaDataset& data, std::size_t j) {
  double sw = 0.0, sw2 = 0.0, swy = 0.0;
  for (const auto& s : data.studies) {
    if (!s.has(j)) continue;
    const double w = 1.0 / (*s.se[j] * *s.se[j]);
    sw += w;
    sw2 += w * w;
    swy += w * *s.y[j];
  }
  const double mu = swy / sw;
  double q = 0.0;
  std::size_t k = 0;
  for (const auto& s : data.studies) {
    if (!s.has(j)) continue;
    const double w = 1.0 / (*s.se[j] * *s.se[j]);
    q += w * (*s.y[j] - mu) * (*s.y[j] - mu);
    ++k;
  }
  const double denom = sw - sw2 / sw;
  return denom > 0.0 ? std::max(0.0, (q - static_cast<double>(k - 1)) / denom) : 0.0;
}

bool all_studies_identical(const MetaDataset& data) {
  const auto& first = data.studies.front();
  return std::all_of(data.studies.begin(), data.studies.end(), [&](const Study& s) {
    return s.y == first.y && s.se == first.se;
  });
}

BrmaParams report_params(const std::array<double, kOutcomes>& tau, double rho,
                         const Eigen::VectorXd& beta, const std::array<int, kOutcomes>& column) {
  BrmaParams p;
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    p.tau2[j] = tau[j] * tau[j];
    if (p.tau2[j] < 1e-14) p.tau2[j] = 0.0;
    p.beta[j] = column[j] >= 0 ? beta[column[j]] : 0.0;
  }
  // tau enters with its sign only through tau1 * tau2 * rho.
  p.rho_b = (tau[0] * tau[1] < 0.0) ? -rho : rho;
  return p;
}

}  // namespace

SmallMatrix marginal_cov(const Study& study, const BrmaParams& params) {
  const std::array<double, kOutcomes> tau{std::sqrt(params.tau2[0]), std::sqrt(params.tau2[1])};
  const SmallMatrix v = study_cov(study, study.observed(), tau, params.rho_b);
  SmallMatrix inv;
  double logdet = 0.0;
  if (!invert_pd(v, inv, logdet)) {
    throw DegenerateError("marginal covariance of study '" + study.id +
                          "' is not positive definite (correlation boundary)");
  }
  return v;
}

double restricted_loglik(const MetaDataset& data, const BrmaParams& params) {
  const RemlObjective obj(data, active_outcomes(data), 1.0);
  const std::array<double, kOutcomes> tau{std::sqrt(params.tau2[0]), std::sqrt(params.tau2[1])};
  return obj.evaluate_at(tau, params.rho_b, nullptr, nullptr, nullptr);
}

std::array<double, kOutcomes> gls_beta(const MetaDataset& data, const BrmaParams& params,
                                      std::array<double, kOutcomes>* se_beta) {
  const auto active = active_outcomes(data);
  const RemlObjective obj(data, active, 1.0);
  const std::array<double, kOutcomes> tau{std::sqrt(params.tau2[0]), std::sqrt(params.tau2[1])};
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
  const double ll = obj.evaluate_at(tau, params.rho_b, nullptr, &beta, &cov);
  if (!std::isfinite(ll)) throw DegenerateError("GLS system is singular at the given parameters");
  std::array<double, kOutcomes> out{0.0, 0.0};
  int col = 0;
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (!active[j]) continue;
    out[j] = beta[col];
    if (se_beta) (*se_beta)[j] = std::sqrt(cov(col, col));
    ++col;
  }
  return out;
}

BrmaFit reml_fit(const MetaDataset& data, const FitOptions& opts) {
  validate(data);
  const auto active = active_outcomes(data);
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    const auto count = data.outcome_count(j);
    if (count == 1) {
      throw DataError("outcome " + std::to_string(j + 1) +
                      " is reported by a single study; at least 2 are required");
    }
  }
  for (const auto& s : data.studies) {
    if (s.complete() && !s.rho_w) {
      throw DataError("study '" + s.id + "' reports both outcomes but has no within-study correlation");
    }
  }

  RemlObjective obj(data, active, opts.rho_bound);
  const Layout& layout = obj.layout();
  std::array<int, kOutcomes> column{-1, -1};
  {
    int col = 0;
    for (std::size_t j = 0; j < kOutcomes; ++j) column[j] = active[j] ? col++ : -1;
  }

  auto finish = [&](const std::array<double, kOutcomes>& tau, double rho, BrmaFit& fit) {
    Eigen::VectorXd beta;
    Eigen::MatrixXd cov;
    fit.loglik_restricted = obj.evaluate_at(tau, rho, nullptr, &beta, &cov);
    fit.params = report_params(tau, rho, beta, column);
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      fit.se_beta[j] = column[j] >= 0 ? std::sqrt(cov(column[j], column[j])) : 0.0;
    }
    fit.outcome_active = active;
  };

  if (all_studies_identical(data)) {
    BrmaFit fit;
    finish({0.0, 0.0}, 0.0, fit);
    fit.converged = true;
    fit.at_boundary = true;
    return fit;
  }

  // Start from moment estimates, floored so the search does not begin on the
  // tau = 0 symmetry point.
  Eigen::VectorXd x0(layout.size);
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (layout.tau_index[j] < 0) continue;
    double mean_s2 = 0.0;
    for (const auto& s : data.studies) {
      if (s.has(j)) mean_s2 += *s.se[j] * *s.se[j];
    }
    mean_s2 /= static_cast<double>(data.outcome_count(j));
    x0[layout.tau_index[j]] = std::sqrt(std::max(moment_tau2(data, j), 0.05 * mean_s2));
  }
  if (layout.z_index >= 0) x0[layout.z_index] = 0.0;

  detail::BfgsOptions bopts;
  bopts.max_iterations = opts.max_iterations;
  bopts.value_tolerance = opts.loglik_tolerance;
  bopts.step_tolerance = opts.param_tolerance;
  bopts.gradient_tolerance = opts.gradient_tolerance;
  // rho = bound * tanh(z); |z| <= 6 keeps rho strictly inside the bound.
  if (layout.z_index >= 0) bopts.box.push_back({layout.z_index, -6.0, 6.0});

  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    return obj.evaluate(x, g);
  };
  detail::BfgsResult res = detail::bfgs_maximize(objective, x0, bopts);
  if (!res.converged) {
    // Restart once from a wider start.
    Eigen::VectorXd x1 = x0 * 2.0;
    if (layout.z_index >= 0) x1[layout.z_index] = 0.5;
    detail::BfgsResult res2 = detail::bfgs_maximize(objective, x1, bopts);
    if (res2.converged || res2.value > res.value) {
      res2.iterations += res.iterations;
      res = std::move(res2);
    }
  }

  BrmaFit fit;
  std::array<double, kOutcomes> tau{};
  double rho = 0.0;
  obj.unpack(res.x, tau, rho);
  finish(tau, rho, fit);
  fit.iterations = res.iterations;
  fit.gradient_norm = res.gradient_norm;
  fit.converged = res.converged;
  for (std::size_t j = 0; j < kOutcomes; ++j) {
    if (active[j] && fit.params.tau2[j] < 1e-8) fit.at_boundary = true;
  }
  if (layout.z_index >= 0 && std::abs(res.x[layout.z_index]) >= 6.0 - 1e-12) fit.at_boundary = true;
  if (!fit.converged) {
    std::ostringstream msg;
    msg << "REML did not converge after " << fit.iterations
        << " iterations (gradient norm " << fit.gradient_norm << ")";
    throw RemlConvergenceError(msg.str(), fit);
  }
  return fit;
}

}  // namespace mvpb
