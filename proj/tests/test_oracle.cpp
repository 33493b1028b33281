#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gradflow/distributions.hpp"
#include "gradflow/oracle.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/samplers.hpp"

using namespace gradflow;
using Catch::Matchers::WithinAbs;

namespace {

GaussianPath make_path(double m0, double m1, double s0 = 1.0, double s1 = 1.0) {
  GaussianPath p;
  p.m0 = Vec::Constant(1, m0);
  p.m1 = Vec::Constant(1, m1);
  p.s0 = s0;
  p.s1 = s1;
  p.validate();
  return p;
}

}  // namespace

TEST_CASE("path moments follow the interpolation formulas") {
  const GaussianPath p = make_path(-1.0, 3.0, 1.0, 2.0);
  REQUIRE_THAT(p.mean_at(0.0)[0], WithinAbs(-1.0, 1e-15));
  REQUIRE_THAT(p.mean_at(1.0)[0], WithinAbs(3.0, 1e-15));
  REQUIRE_THAT(p.mean_at(0.25)[0], WithinAbs(0.0, 1e-15));
  REQUIRE_THAT(p.var_at(0.0), WithinAbs(1.0, 1e-15));
  REQUIRE_THAT(p.var_at(1.0), WithinAbs(4.0, 1e-15));
  REQUIRE_THAT(p.var_at(0.5), WithinAbs(0.25 + 1.0, 1e-15));

  GaussianPath bad = p;
  bad.s1 = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = p;
  bad.m1 = Vec::Zero(2);
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("with equal endpoint spreads the field at t one-half is uniform") {
  const GaussianPath p = make_path(-2.0, 2.0);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec x = Vec::Constant(1, 3.0 * rng.normal());
    const Vec v = gaussian_marginal_field(p, x, 0.5);
    REQUIRE_THAT(v[0], WithinAbs(4.0, 1e-12));
  }
}

TEST_CASE("on the mean curve the field is the endpoint displacement") {
  const GaussianPath p = make_path(0.0, 2.0, 1.0, 2.0);
  for (double t : {0.1, 0.4, 0.9}) {
    const Vec v = gaussian_marginal_field(p, p.mean_at(t), t);
    REQUIRE_THAT(v[0], WithinAbs(2.0, 1e-12));
  }
}

TEST_CASE("the marginal field is the binned conditional mean of the targets") {
  // Independent endpoint draws; within each x_t bin the average conditional
  // velocity must reproduce the closed form. The field is linear in x, so
  // comparing at the realized bin average removes all binning bias and only
  // Monte Carlo noise remains.
  const GaussianPath p = make_path(0.0, 2.0, 1.0, 2.0);
  const double t = 0.5;
  const int n = 400000;
  Rng rng(9);
  const double mu_t = p.mean_at(t)[0];
  const double sd_t = std::sqrt(p.var_at(t));
  const double lo = mu_t - sd_t, hi = mu_t + sd_t;
  const int n_bins = 9;
  std::vector<double> sum_u(n_bins, 0.0), sum_x(n_bins, 0.0);
  std::vector<long> count(n_bins, 0);
  for (int i = 0; i < n; ++i) {
    const double x0 = p.m0[0] + p.s0 * rng.normal();
    const double x1 = p.m1[0] + p.s1 * rng.normal();
    const double xt = (1.0 - t) * x0 + t * x1;
    if (xt < lo || xt >= hi) continue;
    const int b = static_cast<int>((xt - lo) / (hi - lo) * n_bins);
    sum_u[static_cast<std::size_t>(b)] += x1 - x0;
    sum_x[static_cast<std::size_t>(b)] += xt;
    ++count[static_cast<std::size_t>(b)];
  }
  for (int b = 0; b < n_bins; ++b) {
    REQUIRE(count[static_cast<std::size_t>(b)] > 5000);
    const double x_bar = sum_x[static_cast<std::size_t>(b)] /
                         static_cast<double>(count[static_cast<std::size_t>(b)]);
    const double u_bar = sum_u[static_cast<std::size_t>(b)] /
                         static_cast<double>(count[static_cast<std::size_t>(b)]);
    const double v = gaussian_marginal_field(p, Vec::Constant(1, x_bar), t)[0];
    REQUIRE(std::abs(u_bar - v) < 0.04 * std::max(1.0, std::abs(v)));
  }
}

TEST_CASE("the marginal density solves the continuity equation") {
  const GaussianPath p = make_path(0.0, 2.0, 1.0, 2.0);
  const double ht = 1e-4, hx = 1e-4;
  const auto density = [&](double x, double t) {
    return std::exp(gaussian_marginal_log_density(p, Vec::Constant(1, x), t));
  };
  const auto flux = [&](double x, double t) {
    return density(x, t) * gaussian_marginal_field(p, Vec::Constant(1, x), t)[0];
  };

  struct Probe {
    double dt_term;
    double dx_term;
  };
  std::vector<Probe> probes;
  for (double t : {0.25, 0.5, 0.75}) {
    const double mu = p.mean_at(t)[0];
    const double sd = std::sqrt(p.var_at(t));
    for (double k : {-1.5, -1.0, -0.5, 0.5, 1.0, 1.5}) {
      const double x = mu + k * sd;
      probes.push_back({(density(x, t + ht) - density(x, t - ht)) / (2.0 * ht),
                        (flux(x + hx, t) - flux(x - hx, t)) / (2.0 * hx)});
    }
  }
  double scale = 0.0;
  for (const auto& pr : probes)
    scale = std::max({scale, std::abs(pr.dt_term), std::abs(pr.dx_term)});
  REQUIRE(scale > 0.0);
  for (const auto& pr : probes)
    REQUIRE(std::abs(pr.dt_term + pr.dx_term) < 1e-3 * scale);
}

TEST_CASE("integrating the marginal field transports the endpoints") {
  const GaussianPath p = make_path(0.0, 2.0, 1.0, 2.0);
  const VelocityFn field = field_of(p);
  const int n = 20000;
  Rng rng(17);
  Mat x0(n, 1);
  for (int i = 0; i < n; ++i) x0(i, 0) = p.m0[0] + p.s0 * rng.normal();
  const Mat x1 = ode_terminal_states(field, x0, 200);
  const double mean = x1.col(0).mean();
  const double var = (x1.col(0).array() - mean).square().sum() / (n - 1);
  REQUIRE(std::abs(mean - 2.0) < 0.05);
  REQUIRE(std::abs(var - 4.0) < 0.12);
}

TEST_CASE("the marginal density matches the distribution module at fixed t") {
  const GaussianPath p = make_path(-1.0, 1.0, 1.0, 0.5);
  for (double t : {0.2, 0.6}) {
    const auto snapshot =
        make_isotropic_gaussian(p.mean_at(t), p.var_at(t));
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
      const Vec x = Vec::Constant(1, 2.0 * rng.normal());
      REQUIRE_THAT(gaussian_marginal_log_density(p, x, t),
                   WithinAbs(log_density(snapshot, x), 1e-12));
      REQUIRE_THAT(gaussian_marginal_score(p, x, t)[0],
                   WithinAbs(score(snapshot, x)[0], 1e-12));
    }
  }
}

TEST_CASE("the tilted law reduces to the endpoints at extreme beta") {
  const GaussianMoments base{-1.0, 0.5};
  const GaussianMoments target{3.0, 2.0};
  const GaussianMoments at0 = geometric_tilt_gaussian(base, target, 0.0);
  REQUIRE_THAT(at0.mean, WithinAbs(target.mean, 1e-12));
  REQUIRE_THAT(at0.var, WithinAbs(target.var, 1e-12));
  const GaussianMoments huge = geometric_tilt_gaussian(base, target, 1e9);
  REQUIRE_THAT(huge.mean, WithinAbs(base.mean, 1e-6));
  REQUIRE_THAT(huge.var, WithinAbs(base.var, 1e-6));

  const GaussianMoments even =
      geometric_tilt_gaussian({0.0, 1.0}, {4.0, 1.0}, 1.0);
  REQUIRE_THAT(even.mean, WithinAbs(2.0, 1e-12));
  REQUIRE_THAT(even.var, WithinAbs(1.0, 1e-12));

  REQUIRE_THROWS_AS(geometric_tilt_gaussian({0.0, -1.0}, target, 1.0),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(geometric_tilt_gaussian(base, target, -1.0),
                    std::invalid_argument);
}

TEST_CASE("the tilted moments match a brute-force normalized product") {
  // Oracle: normalize q^(1/(1+beta)) p^(beta/(1+beta)) on a wide grid by
  // trapezoid quadrature and read off mean and variance numerically.
  Rng rng(29);
  const double betas[] = {0.25, 0.5, 1.0, 2.0, 4.0};
  for (int trial = 0; trial < 5; ++trial) {
    const GaussianMoments base{2.0 * rng.uniform() - 1.0, 0.3 + 2.0 * rng.uniform()};
    const GaussianMoments target{2.0 * rng.uniform() - 1.0, 0.3 + 2.0 * rng.uniform()};
    const double beta = betas[trial];

    const double w_q = 1.0 / (1.0 + beta);
    const double w_b = beta / (1.0 + beta);
    const auto log_tilt = [&](double x) {
      const double lq = -0.5 * (x - target.mean) * (x - target.mean) / target.var -
                        0.5 * std::log(2.0 * std::numbers::pi * target.var);
      const double lb = -0.5 * (x - base.mean) * (x - base.mean) / base.var -
                        0.5 * std::log(2.0 * std::numbers::pi * base.var);
      return w_q * lq + w_b * lb;
    };

    const int n = 20001;
    const double lo = -15.0, hi = 15.0;
    const double dx = (hi - lo) / (n - 1);
    double z = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = lo + i * dx;
      const double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      const double f = w * std::exp(log_tilt(x));
      z += f;
      m1 += f * x;
      m2 += f * x * x;
    }
    const double mean = m1 / z;
    const double var = m2 / z - mean * mean;

    const GaussianMoments closed = geometric_tilt_gaussian(base, target, beta);
    REQUIRE_THAT(closed.mean, WithinAbs(mean, 1e-6));
    REQUIRE_THAT(closed.var, WithinAbs(var, 1e-6));
  }
}

TEST_CASE("the tilted mean retreats monotonically as beta grows") {
  const GaussianMoments base{0.0, 0.5};
  const GaussianMoments target{4.0, 2.0};
  double prev = geometric_tilt_gaussian(base, target, 0.0).mean;
  for (double beta = 0.05; beta <= 100.0; beta *= 1.3) {
    const double m = geometric_tilt_gaussian(base, target, beta).mean;
    REQUIRE(m < prev);
    prev = m;
  }
}

TEST_CASE("probing the exact optimal field reports a vanishing error") {
  const GaussianPath base = make_path(0.0, -2.0);
  const GaussianPath target = make_path(0.0, 2.0);
  for (double beta : {0.0, 0.5, 2.0}) {
    const VelocityFn exact =
        optimal_drift_field(field_of(target), field_of(base), beta);
    const DriftMatchReport report = verify_optimal_drift(base, target, beta, exact);
    REQUIRE(report.sup_rel_err < 1e-12);
    REQUIRE(report.mean_rel_err < 1e-12);
    REQUIRE(report.beta == beta);
  }
}

TEST_CASE("probing a mismatched field reports a large error") {
  const GaussianPath base = make_path(0.0, -2.0);
  const GaussianPath target = make_path(0.0, 2.0);
  // The raw target field ignores the anchor entirely; at beta = 2 it is far
  // from the optimal convex combination.
  const DriftMatchReport report =
      verify_optimal_drift(base, target, 2.0, field_of(target));
  REQUIRE(report.mean_rel_err > 0.05);
}

TEST_CASE("the probe grid adapts to dimension and rejects high dimensions") {
  GaussianPath base, target;
  base.m0 = Vec::Zero(2);
  base.m1 = Vec::Constant(2, -1.0);
  target.m0 = Vec::Zero(2);
  target.m1 = Vec::Constant(2, 1.0);
  const VelocityFn exact =
      optimal_drift_field(field_of(target), field_of(base), 1.0);
  const DriftMatchReport report = verify_optimal_drift(base, target, 1.0, exact);
  REQUIRE(report.x_count_per_dim == 21);
  REQUIRE(report.sup_rel_err < 1e-12);

  GaussianPath wide;
  wide.m0 = Vec::Zero(3);
  wide.m1 = Vec::Ones(3);
  REQUIRE_THROWS_AS(verify_optimal_drift(wide, wide, 1.0, exact),
                    std::invalid_argument);
}
