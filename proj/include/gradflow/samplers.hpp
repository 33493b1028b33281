#pragma once

// Forward integration of learned dynamics on the uniform grid over [0, 1]:
// Euler for the ODE, Euler-Maruyama for the SDE, the score-based drift
// conversion between them, and the kinetic path-length functional.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

// One integrated path. Drift samples sit at step starts (left endpoints),
// so velocities has one row fewer than states. For sigma = 0 the recorded
// triples satisfy states[i+1] = states[i] + velocities[i] * dt exactly.
struct Trajectory {
  Vec times;       // N+1 grid points, times[0] = 0, times[N] = 1
  Mat states;      // (N+1) x dim
  Mat velocities;  // N x dim
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// Integration abandons the path the moment a state or drift goes non-finite;
// the failing step index is carried in the message and the field.
class IntegrationError : public NonFiniteError {
 public:
  IntegrationError(const std::string& what, int step)
      : NonFiniteError(what + " at step " + std::to_string(step)),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

namespace detail {

// Shared Euler / Euler-Maruyama core. rng == nullptr means no diffusion
// term is added or drawn, which keeps the sigma = 0 SDE bit-identical to
// the ODE path.
inline Trajectory integrate(const VelocityFn& field, const Vec& x0,
                            int n_steps, double sigma, Rng* rng) {
  if (n_steps < 1) throw std::invalid_argument("integrate: n_steps < 1");
  if (!x0.allFinite())
    throw std::invalid_argument("integrate: non-finite start state");
  const int d = static_cast<int>(x0.size());
  const double dt = 1.0 / static_cast<double>(n_steps);
  Trajectory traj;
  traj.sigma = sigma;
  traj.times = Vec::LinSpaced(n_steps + 1, 0.0, 1.0);
  traj.states.resize(n_steps + 1, d);
  traj.velocities.resize(n_steps, d);
  traj.states.row(0) = x0;
  Vec x = x0;
  const double noise_scale = sigma * std::sqrt(dt);
  for (int i = 0; i < n_steps; ++i) {
    const Vec v = field(x, traj.times[i]);
    if (!v.allFinite()) throw IntegrationError("non-finite drift", i);
    traj.velocities.row(i) = v;
    x += dt * v;
    if (rng != nullptr) {
      for (int k = 0; k < d; ++k) x[k] += noise_scale * rng->normal();
    }
    if (!x.allFinite()) throw IntegrationError("non-finite state", i);
    traj.states.row(i + 1) = x;
  }
  return traj;
}

}  // namespace detail

inline Trajectory ode_euler(const VelocityFn& field, const Vec& x0,
                            int n_steps) {
  return detail::integrate(field, x0, n_steps, 0.0, nullptr);
}

inline Trajectory sde_euler_maruyama(const VelocityFn& field, double sigma,
                                     const Vec& x0, int n_steps,
                                     std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("sde: sigma < 0");
  Trajectory traj;
  if (sigma == 0.0) {
    traj = detail::integrate(field, x0, n_steps, 0.0, nullptr);
  } else {
    Rng rng(seed, /*stream=*/0x736465'70617468ULL);
    traj = detail::integrate(field, x0, n_steps, sigma, &rng);
  }
  traj.seed = seed;
  return traj;
}

// Batch variants. Per-sample RNG streams derive from (seed, row), so any
// execution order produces the same ensemble.
inline std::vector<Trajectory> sde_batch(const VelocityFn& field, double sigma,
                                         const Mat& x0s, int n_steps,
                                         std::uint64_t seed) {
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(x0s.rows()));
  for (Eigen::Index i = 0; i < x0s.rows(); ++i) {
    const Vec x0 = x0s.row(i);
    out.push_back(sde_euler_maruyama(
        field, sigma, x0, n_steps, mix64(seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

// Terminal states only; the workhorse for generating model samples.
inline Mat ode_terminal_states(const VelocityFn& field, const Mat& x0s,
                               int n_steps) {
  Mat out(x0s.rows(), x0s.cols());
  for (Eigen::Index i = 0; i < x0s.rows(); ++i) {
    const Vec x0 = x0s.row(i);
    const Trajectory traj = ode_euler(field, x0, n_steps);
    out.row(i) = traj.states.row(traj.states.rows() - 1);
  }
  return out;
}

// Drift that reproduces the ODE's marginals when integrated with diffusion
// sigma: f(x, t) = v(x, t) + (sigma^2 / 2) * score(x, t), where score is
// the gradient of the log marginal density.
inline VelocityFn ode_to_sde_drift(VelocityFn v, VelocityFn score,
                                   double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("ode_to_sde_drift: sigma < 0");
  if (sigma == 0.0) return v;
  const double half_var = 0.5 * sigma * sigma;
  return [v = std::move(v), score = std::move(score), half_var](
             const Vec& x, double t) -> Vec {
    return v(x, t) + half_var * score(x, t);
  };
}

struct PathLength {
  double mean = 0.0;
  double std_dev = 0.0;  // population standard deviation over the batch
};

// Accumulated squared speed along Euler ODE paths:
// L = sum_i |v(x_i, t_i)|^2 * dt per sample. Per-sample values are summed
// in sorted order so a permutation of the batch cannot change the result.
inline PathLength path_length(const VelocityFn& field, const Mat& x0_batch,
                              int n_steps = 100) {
  const Eigen::Index m = x0_batch.rows();
  if (m == 0) throw std::invalid_argument("path_length: empty batch");
  const double dt = 1.0 / static_cast<double>(n_steps);
  std::vector<double> lengths(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec x0 = x0_batch.row(i);
    const Trajectory traj = ode_euler(field, x0, n_steps);
    lengths[static_cast<std::size_t>(i)] =
        traj.velocities.rowwise().squaredNorm().sum() * dt;
  }
  std::sort(lengths.begin(), lengths.end());
  double total = 0.0;
  for (double l : lengths) total += l;
  const double mean = total / static_cast<double>(m);
  double sq = 0.0;
  for (double l : lengths) sq += (l - mean) * (l - mean);
  return {mean, std::sqrt(sq / static_cast<double>(m))};
}

}  // namespace gradflow
