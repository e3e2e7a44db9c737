#pragma once

// Small dense BFGS maximiser with backtracking line search and optional
// per-coordinate box constraints (handled by projection). Used for the REML
// variance-component search, where the parameter vector has at most three
// entries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Core>

namespace mvpb::detail {

struct BoxBound {
  int index;
  double lower;
  double upper;
};

struct BfgsOptions {
  int max_iterations = 500;
  double value_tolerance = 1e-10;
  double step_tolerance = 1e-8;
  double gradient_tolerance = 1e-6;
  double max_step = 1.0;
  std::vector<BoxBound> box;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  double gradient_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// f(x, grad) returns the objective and writes the gradient when grad is
/// non-null; -inf marks an infeasible point.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

inline void project(Eigen::VectorXd& x, const std::vector<BoxBound>& box) {
  for (const auto& b : box) x[b.index] = std::clamp(x[b.index], b.lower, b.upper);
}

// Gradient with components zeroed where they push against an active bound.
inline Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, Eigen::VectorXd g,
                                          const std::vector<BoxBound>& box) {
  for (const auto& b : box) {
    if ((x[b.index] <= b.lower && g[b.index] < 0.0) || (x[b.index] >= b.upper && g[b.index] > 0.0)) {
      g[b.index] = 0.0;
    }
  }
  return g;
}

inline BfgsResult bfgs_maximize(const Objective& f, Eigen::VectorXd x, const BfgsOptions& opts) {
  const auto n = x.size();
  BfgsResult out;
  project(x, opts.box);
  Eigen::VectorXd g(n);
  double fx = f(x, &g);
  out.x = x;
  out.value = fx;
  if (!std::isfinite(fx)) return out;
  if (n == 0) {
    out.gradient_norm = 0.0;
    out.converged = true;
    return out;
  }

  // Inverse of the negative Hessian approximation.
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n);
  bool fresh = true;
  int stalls = 0;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    out.iterations = it;
    Eigen::VectorXd pg = projected_gradient(x, g, opts.box);
    out.gradient_norm = pg.norm();
    if (out.gradient_norm < opts.gradient_tolerance) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd dir = h * pg;
    if (!(dir.dot(pg) > 0.0)) {
      h.setIdentity();
      fresh = true;
      dir = pg;
    }
    const double longest = dir.cwiseAbs().maxCoeff();
    double step = longest > opts.max_step ? opts.max_step / longest : 1.0;

    Eigen::VectorXd x_new(n), g_new(n);
    double f_new = -std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      project(x_new, opts.box);
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && f_new >= fx + 1e-4 * pg.dot(x_new - x)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!fresh) {
        h.setIdentity();
        fresh = true;
        continue;
      }
      // No ascent possible along the gradient: numerically stationary.
      out.converged = out.gradient_norm < std::sqrt(opts.gradient_tolerance);
      break;
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g - g_new;  // curvature of the negated objective
    const double df = f_new - fx;
    x = x_new;
    fx = f_new;
    g = g_new;
    out.x = x;
    out.value = fx;

    const double sy = s.dot(y);
    if (sy > 1e-14 * s.norm() * y.norm()) {
      if (fresh) h *= sy / y.squaredNorm();
      const double r = 1.0 / sy;
      const Eigen::MatrixXd i_n = Eigen::MatrixXd::Identity(n, n);
      h = (i_n - r * s * y.transpose()) * h * (i_n - r * y * s.transpose()) + r * s * s.transpose();
      fresh = false;
    }

    if (std::abs(df) < opts.value_tolerance && s.cwiseAbs().maxCoeff() < opts.step_tolerance) {
      if (++stalls >= 2) {
        out.gradient_norm = projected_gradient(x, g, opts.box).norm();
        out.converged = out.gradient_norm < std::sqrt(opts.gradient_tolerance);
        break;
      }
    } else {
      stalls = 0;
    }
  }
  if (!out.converged) out.gradient_norm = projected_gradient(x, g, opts.box).norm();
  if (!out.converged && out.gradient_norm < opts.gradient_tolerance) out.converged = true;
  return out;
}

}  // namespace mvpb::detail
