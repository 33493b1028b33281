#pragma once

// Shared helpers for the test suite: tiny deterministic models with known
// outputs and a central-difference gradient oracle.

#include <functional>

#include "gradflow/mlp.hpp"
#include "gradflow/types.hpp"

namespace gradflow::testing {

// Network that outputs the constant c for every (x, t): zero weights make
// every hidden unit sit at activation(0) = 0, so the output equals the last
// bias, which is set to c.
inline MlpParams constant_model(int dim, const Vec& c,
                                Activation act = Activation::tanh) {
  MlpParams model;
  model.arch = {dim + 1, 2, dim};
  model.activation = act;
  model.theta = Vec::Zero(theta_size(model.arch));
  const auto layout = detail::theta_layout(model.arch);
  model.theta.segment(layout.bias_offset[1], dim) = c;
  return model;
}

// Central-difference gradient of a scalar function of theta.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f,
                       const Vec& theta, double h = 1e-4) {
  Vec grad(theta.size());
  Vec probe = theta;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    probe[k] = theta[k] + h;
    const double hi = f(probe);
    probe[k] = theta[k] - h;
    const double lo = f(probe);
    probe[k] = theta[k];
    grad[k] = (hi - lo) / (2.0 * h);
  }
  return grad;
}

inline double rel_err(double got, double want) {
  const double denom = std::abs(want) > 1e-12 ? std::abs(want) : 1.0;
  return std::abs(got - want) / denom;
}

}  // namespace gradflow::testing
