#pragma once

// Random datasets for property tests. Deliberately independent of the
// simulation module so that generator bugs cannot mask estimator bugs.

#include <cmath>
#include <random>
#include <string>

#include "mvpb/meta_model.hpp"

namespace testing_support {

struct DatasetShape {
  int studies = 12;
  double partial_fraction = 0.0;  ///< share of studies reporting one outcome
  double tau2 = 0.6;
  double rho_w = 0.4;
  double rho_b = 0.3;
  bool drop_outcome2 = false;
};

inline mvpb::MetaDataset random_dataset(std::mt19937_64& rng, const DatasetShape& shape) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> se(0.15, 1.2);
  mvpb::MetaDataset d;
  const double t = std::sqrt(shape.tau2);
  for (int i = 0; i < shape.studies; ++i) {
    const double z1 = z(rng), z2 = z(rng);
    const double th1 = 0.3 + t * z1;
    const double th2 = -0.2 + t * (shape.rho_b * z1 + std::sqrt(1 - shape.rho_b * shape.rho_b) * z2);
    const double s1 = se(rng), s2 = se(rng);
    const double e1 = z(rng), e2 = z(rng);
    mvpb::Study s;
    s.id = "s" + std::to_string(i + 1);
    s.y[0] = th1 + s1 * e1;
    s.se[0] = s1;
    if (!shape.drop_outcome2) {
      s.y[1] = th2 + s2 * (shape.rho_w * e1 + std::sqrt(1 - shape.rho_w * shape.rho_w) * e2);
      s.se[1] = s2;
      if (u(rng) < shape.partial_fraction) {
        // Drop one outcome at random.
        const std::size_t j = u(rng) < 0.5 ? 0 : 1;
        s.y[j].reset();
        s.se[j].reset();
      } else {
        s.rho_w = shape.rho_w;
      }
    }
    d.studies.push_back(s);
  }
  return d;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace testing_support
