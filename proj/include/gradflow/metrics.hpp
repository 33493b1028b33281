#pragma once

// Measurements over runs: Gaussian-fit Frechet distance between sample
// clouds, Monte-Carlo KL between path measures with shared diffusion, a
// Fisher-information quadratic form approximating that KL for nearby
// parameters, and three statistics describing how smoothly a metric series
// converges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "gradflow/mlp.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/samplers.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

// A metric logged against training epochs.
struct MetricsSeries {
  std::vector<long> epochs;
  std::vector<double> values;

  void validate() const {
    if (epochs.size() != values.size())
      throw std::invalid_argument("series: length mismatch");
    for (std::size_t i = 1; i < epochs.size(); ++i)
      if (epochs[i] <= epochs[i - 1])
        throw std::invalid_argument("series: epochs not strictly increasing");
    for (double v : values)
      if (!std::isfinite(v))
        throw std::invalid_argument("series: non-finite value");
  }
  std::size_t size() const { return values.size(); }
};

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians fitted to samples
// ---------------------------------------------------------------------------

struct FrechetResult {
  double value = 0.0;
  // Set when a near-singular covariance forced an epsilon ridge before the
  // matrix square roots.
  bool regularized = false;
};

namespace detail {

inline Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (m + m.transpose()));
  Vec lam = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * lam.cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
}

inline double min_eigenvalue(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (m + m.transpose()));
  return eig.eigenvalues().minCoeff();
}

}  // namespace detail

// Squared 2-Wasserstein distance between the Gaussians with the given
// moments. Near-singular covariances get an epsilon ridge (1e-9 I) and the
// result is flagged.
inline FrechetResult frechet_from_moments(const Vec& mu_a, const Mat& cov_a,
                                          const Vec& mu_b, const Mat& cov_b) {
  if (mu_a.size() != mu_b.size() || cov_a.rows() != cov_b.rows())
    throw std::invalid_argument("frechet: dimension mismatch");
  Mat sa = 0.5 * (cov_a + cov_a.transpose());
  Mat sb = 0.5 * (cov_b + cov_b.transpose());
  FrechetResult result;
  constexpr double kDegenerate = 1e-12;
  constexpr double kRidge = 1e-9;
  if (detail::min_eigenvalue(sa) < kDegenerate ||
      detail::min_eigenvalue(sb) < kDegenerate) {
    sa.diagonal().array() += kRidge;
    sb.diagonal().array() += kRidge;
    result.regularized = true;
  }
  const Mat root_a = detail::psd_sqrt(sa);
  const Mat cross = detail::psd_sqrt(root_a * sb * root_a);
  result.value = (mu_a - mu_b).squaredNorm() +
                 (sa + sb - 2.0 * cross).trace();
  // Round-off can leave a tiny negative on identical moments.
  if (result.value < 0.0 && result.value > -1e-8) result.value = 0.0;
  return result;
}

inline Vec sample_mean(const Mat& samples) {
  return samples.colwise().mean();
}

// Unbiased (n-1) sample covariance.
inline Mat sample_covariance(const Mat& samples) {
  const Eigen::Index n = samples.rows();
  if (n < 2) throw std::invalid_argument("covariance: need at least 2 rows");
  const Mat centered = samples.rowwise() - samples.colwise().mean();
  return (centered.transpose() * centered) / static_cast<double>(n - 1);
}

inline FrechetResult frechet_gaussian(const Mat& samples_a,
                                      const Mat& samples_b) {
  if (samples_a.cols() != samples_b.cols())
    throw std::invalid_argument("frechet: dimension mismatch");
  const Eigen::Index d = samples_a.cols();
  if (samples_a.rows() < d + 1 || samples_b.rows() < d + 1)
    throw std::invalid_argument("frechet: need at least dim+1 samples");
  return frechet_from_moments(sample_mean(samples_a),
                              sample_covariance(samples_a),
                              sample_mean(samples_b),
                              sample_covariance(samples_b));
}

inline double frechet_gaussian_distance(const Mat& samples_a,
                                        const Mat& samples_b) {
  return frechet_gaussian(samples_a, samples_b).value;
}

// ---------------------------------------------------------------------------
// Path-measure KL via Girsanov
// ---------------------------------------------------------------------------

// Monte-Carlo estimate of E[ (1/(2 sigma^2)) integral |f - g|^2 dt ] with
// the expectation under the measure the trajectories were drawn from (drift
// f, same sigma). Left-endpoint quadrature on each trajectory's grid.
inline double girsanov_kl_mc(const VelocityFn& f, const VelocityFn& g,
                             double sigma,
                             const std::vector<Trajectory>& trajectories) {
  if (!(sigma > 0.0))
    throw std::invalid_argument(
        "girsanov_kl_mc: needs nondegenerate diffusion (sigma > 0)");
  if (trajectories.empty())
    throw std::invalid_argument("girsanov_kl_mc: no trajectories");
  const double inv_two_var = 0.5 / (sigma * sigma);
  double total = 0.0;
  for (const Trajectory& traj : trajectories) {
    const Eigen::Index steps = traj.velocities.rows();
    double path_sum = 0.0;
    for (Eigen::Index i = 0; i < steps; ++i) {
      const double dt = traj.times[i + 1] - traj.times[i];
      const Vec x = traj.states.row(i);
      const double t = traj.times[i];
      path_sum += (f(x, t) - g(x, t)).squaredNorm() * dt;
    }
    total += inv_two_var * path_sum;
  }
  return total / static_cast<double>(trajectories.size());
}

// ---------------------------------------------------------------------------
// Fisher quadratic form
// ---------------------------------------------------------------------------

struct FisherMatrix {
  int dim_params = 0;
  Mat matrix;  // symmetric PSD
  long n_mc = 0;
};

// Output-in-parameters Jacobian at a state-time pair, rows = output dims.
using JacobianFn = std::function<Mat(const Vec&, double)>;

// Monte-Carlo average of J^T J over (x, tau) pairs read off the given
// trajectories: tau is uniform over step starts, x the matching state.
inline FisherMatrix fisher_matrix_generic(
    const JacobianFn& jacobian, int dim_params,
    const std::vector<Trajectory>& trajectories, long n_mc,
    std::uint64_t seed) {
  if (dim_params > 20000)
    throw std::invalid_argument("fisher: parameter count over dense limit");
  if (trajectories.empty())
    throw std::invalid_argument("fisher: no trajectories");
  if (n_mc < 1) throw std::invalid_argument("fisher: n_mc < 1");
  Mat accum = Mat::Zero(dim_params, dim_params);
  for (long s = 0; s < n_mc; ++s) {
    Rng rng(mix64(seed, static_cast<std::uint64_t>(s), /*b=*/4));
    const auto& traj = trajectories[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(trajectories.size())))];
    const int steps = static_cast<int>(traj.velocities.rows());
    const int i = rng.uniform_int(steps);
    const Vec x = traj.states.row(i);
    const Mat jac = jacobian(x, traj.times[i]);
    if (jac.cols() != dim_params)
      throw std::invalid_argument("fisher: jacobian width mismatch");
    accum.noalias() += jac.transpose() * jac;
  }
  FisherMatrix out;
  out.dim_params = dim_params;
  out.matrix = (accum / static_cast<double>(n_mc));
  out.matrix = 0.5 * (out.matrix + out.matrix.transpose());
  out.n_mc = n_mc;
  return out;
}

inline FisherMatrix fisher_matrix(const MlpParams& base_model,
                                  const std::vector<Trajectory>& trajectories,
                                  long n_mc, std::uint64_t seed) {
  const int p = static_cast<int>(base_model.theta.size());
  return fisher_matrix_generic(
      [&base_model](const Vec& x, double t) {
        return param_jacobian(base_model, x, t);
      },
      p, trajectories, n_mc, seed);
}

// Second-order KL proxy for a small parameter move: half * d^T F d.
inline double fisher_kl_quadratic(const FisherMatrix& fisher,
                                  const Vec& delta_theta) {
  if (delta_theta.size() != fisher.dim_params)
    throw std::invalid_argument("fisher_kl_quadratic: length mismatch");
  return 0.5 * delta_theta.dot(fisher.matrix * delta_theta);
}

// ---------------------------------------------------------------------------
// Convergence-stability statistics
// ---------------------------------------------------------------------------

namespace detail {

struct Window {
  std::size_t begin;
  std::size_t end;  // half-open
};

inline void check_window(const MetricsSeries& series, int window) {
  series.validate();
  if (window < 2) throw std::invalid_argument("stability: window < 2");
  if (static_cast<std::size_t>(window) > series.size())
    throw std::invalid_argument("stability: window longer than series");
}

}  // namespace detail

// Average over disjoint windows of the RBF-weighted variance of the metric
// about its RBF-weighted mean. Weights center on the window's epoch midpoint
// with bandwidth defaulting to half the window's epoch span; wide bandwidth
// recovers the plain window variance. Windows step by their own length and a
// trailing partial window is dropped.
inline double instantaneous_variance(const MetricsSeries& series,
                                     int window = 10,
                                     double bandwidth = -1.0) {
  detail::check_window(series, window);
  const std::size_t w = static_cast<std::size_t>(window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + w <= series.size(); start += w) {
    const double e_lo = static_cast<double>(series.epochs[start]);
    const double e_hi = static_cast<double>(series.epochs[start + w - 1]);
    const double center = 0.5 * (e_lo + e_hi);
    double h = bandwidth;
    if (h <= 0.0) h = 0.5 * (e_hi - e_lo);
    if (h <= 0.0) h = 1.0;
    double sw = 0.0, swv = 0.0;
    for (std::size_t i = start; i < start + w; ++i) {
      const double u = (static_cast<double>(series.epochs[i]) - center) / h;
      const double wt = std::exp(-0.5 * u * u);
      sw += wt;
      swv += wt * series.values[i];
    }
    const double mean = swv / sw;
    double var = 0.0;
    for (std::size_t i = start; i < start + w; ++i) {
      const double u = (static_cast<double>(series.epochs[i]) - center) / h;
      const double wt = std::exp(-0.5 * u * u);
      var += wt * (series.values[i] - mean) * (series.values[i] - mean);
    }
    total += var / sw;
    ++count;
  }
  return total / static_cast<double>(count);
}

// Mean absolute ordinary-least-squares slope over sliding windows, epochs as
// the regressor. A flat series scores 0; steadily moving metrics score their
// true rate.
inline double convergence_rate(const MetricsSeries& series, int window = 10) {
  detail::check_window(series, window);
  const std::size_t w = static_cast<std::size_t>(window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + w <= series.size(); ++start) {
    double se = 0.0, sv = 0.0;
    for (std::size_t i = start; i < start + w; ++i) {
      se += static_cast<double>(series.epochs[i]);
      sv += series.values[i];
    }
    const double me = se / static_cast<double>(w);
    const double mv = sv / static_cast<double>(w);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = start; i < start + w; ++i) {
      const double de = static_cast<double>(series.epochs[i]) - me;
      sxx += de * de;
      sxy += de * (series.values[i] - mv);
    }
    if (sxx == 0.0)
      throw std::invalid_argument("convergence_rate: degenerate epochs");
    total += std::abs(sxy / sxx);
    ++count;
  }
  return total / static_cast<double>(count);
}

struct SpearmanResult {
  double rho = 0.0;
  // All values tied: rank variance is zero and rho is defined as 0.
  bool degenerate = false;
};

namespace detail {

// Average ranks (ties share their mean rank).
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b];
  });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// Rank correlation between epochs and the metric, average-rank ties.
inline SpearmanResult spearman(const MetricsSeries& series) {
  series.validate();
  const std::size_t n = series.size();
  if (n < 3) throw std::invalid_argument("spearman: need length >= 3");
  std::vector<double> epoch_vals(n), metric_vals(n);
  for (std::size_t i = 0; i < n; ++i) {
    epoch_vals[i] = static_cast<double>(series.epochs[i]);
    metric_vals[i] = series.values[i];
  }
  const std::vector<double> ra = detail::average_ranks(epoch_vals);
  const std::vector<double> rb = detail::average_ranks(metric_vals);
  const double mean_rank = 0.5 * static_cast<double>(n - 1);
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = ra[i] - mean_rank;
    const double b = rb[i] - mean_rank;
    num += a * b;
    da += a * a;
    db += b * b;
  }
  SpearmanResult out;
  if (da == 0.0 || db == 0.0) {
    out.degenerate = true;
    out.rho = 0.0;
    return out;
  }
  out.rho = num / std::sqrt(da * db);
  return out;
}

inline double spearman_rho(const MetricsSeries& series) {
  return spearman(series).rho;
}

}  // namespace gradflow
