#pragma once

#include <functional>
#include <stdexcept>

#include <Eigen/Dense>

namespace gradflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// A time-dependent vector field x, t -> v(x, t).
using VelocityFn = std::function<Vec(const Vec&, double)>;

// Raised when a computation that must stay finite produces NaN or infinity.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gradflow
