#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gradflow/metrics.hpp"
#include "gradflow/mlp.hpp"
#include "gradflow/oracle.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/samplers.hpp"

using namespace gradflow;
using Catch::Matchers::WithinAbs;

namespace {

Mat normal_cloud(int n, int dim, std::uint64_t seed, double mean = 0.0,
                 double sd = 1.0) {
  Rng rng(seed);
  Mat x(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = mean + sd * rng.normal();
  return x;
}

MetricsSeries series_of(std::vector<long> epochs, std::vector<double> values) {
  MetricsSeries s;
  s.epochs = std::move(epochs);
  s.values = std::move(values);
  return s;
}

MetricsSeries iota_series(int n, const std::function<double(long)>& f) {
  MetricsSeries s;
  for (long e = 0; e < n; ++e) {
    s.epochs.push_back(e);
    s.values.push_back(f(e));
  }
  return s;
}

}  // namespace

TEST_CASE("identical clouds have zero distance") {
  const Mat x = normal_cloud(60, 2, 1);
  const FrechetResult r = frechet_gaussian(x, x);
  REQUIRE(std::abs(r.value) < 1e-8);
  REQUIRE_FALSE(r.regularized);
}

TEST_CASE("moment-injected distances match closed forms") {
  // 1-D: mean shift only.
  const auto shift = frechet_from_moments(
      Vec::Zero(1), Mat::Identity(1, 1), Vec::Ones(1), Mat::Identity(1, 1));
  REQUIRE_THAT(shift.value, WithinAbs(1.0, 1e-12));

  // 1-D: spread only, (sqrt(4) - sqrt(1))^2 = 1.
  const auto spread = frechet_from_moments(
      Vec::Zero(1), Mat::Identity(1, 1), Vec::Zero(1), 4.0 * Mat::Identity(1, 1));
  REQUIRE_THAT(spread.value, WithinAbs(1.0, 1e-10));

  // 2-D commuting diagonals: |mu|^2 + sum (sqrt(a) - sqrt(b))^2.
  Vec mu(2);
  mu << 1.0, 0.0;
  Mat ca = Mat::Identity(2, 2);
  Mat cb = Mat::Zero(2, 2);
  cb(0, 0) = 4.0;
  cb(1, 1) = 9.0;
  const auto both = frechet_from_moments(mu, ca, Vec::Zero(2), cb);
  REQUIRE_THAT(both.value, WithinAbs(1.0 + 1.0 + 4.0, 1e-9));

  const auto swapped = frechet_from_moments(Vec::Zero(2), cb, mu, ca);
  REQUIRE_THAT(swapped.value, WithinAbs(both.value, 1e-9));
}

TEST_CASE("sample statistics agree with direct formulas") {
  Mat x(3, 2);
  x << 1.0, 2.0, 3.0, 4.0, 5.0, 9.0;
  const Vec mu = sample_mean(x);
  REQUIRE_THAT(mu[0], WithinAbs(3.0, 1e-14));
  REQUIRE_THAT(mu[1], WithinAbs(5.0, 1e-14));
  const Mat cov = sample_covariance(x);
  REQUIRE_THAT(cov(0, 0), WithinAbs(4.0, 1e-12));
  REQUIRE_THAT(cov(1, 1), WithinAbs(13.0, 1e-12));
  REQUIRE_THAT(cov(0, 1), WithinAbs(7.0, 1e-12));
  REQUIRE_THAT(cov(1, 0), WithinAbs(7.0, 1e-12));
  REQUIRE_THROWS_AS(sample_covariance(x.topRows(1)), std::invalid_argument);
}

TEST_CASE("degenerate covariances are ridge-regularized and flagged") {
  Mat constant = Mat::Zero(10, 2);
  constant.col(0).array() = 1.0;
  const FrechetResult r = frechet_gaussian(constant, constant);
  REQUIRE(r.regularized);
  REQUIRE(std::abs(r.value) < 1e-6);
  REQUIRE_THROWS_AS(frechet_gaussian(Mat::Zero(2, 2), Mat::Zero(10, 2)),
                    std::invalid_argument);
}

TEST_CASE("two estimated gaussians recover their true separation") {
  const Mat a = normal_cloud(20000, 1, 11, 0.0, 1.0);
  const Mat b = normal_cloud(20000, 1, 12, 1.0, 1.0);
  REQUIRE_THAT(frechet_gaussian_distance(a, b), WithinAbs(1.0, 0.05));
}

TEST_CASE("path divergence vanishes when the drifts agree") {
  const VelocityFn f = [](const Vec& x, double) -> Vec { return -x; };
  const auto trajs = sde_batch(f, 1.0, Mat::Zero(5, 1), 20, 3);
  REQUIRE(girsanov_kl_mc(f, f, 1.0, trajs) == 0.0);
}

TEST_CASE("a constant drift gap integrates to the exact quadratic cost") {
  const VelocityFn f = [](const Vec& x, double) -> Vec {
    Vec v = Vec::Zero(x.size());
    v[0] = 1.0;
    return v;
  };
  const VelocityFn g = [](const Vec& x, double) -> Vec {
    return Vec::Zero(x.size());
  };
  const auto trajs = sde_batch(f, 1.0, Mat::Zero(8, 2), 100, 5);
  // KL = (1 / (2 sigma^2)) * |f - g|^2 * total time = 0.5.
  REQUIRE_THAT(girsanov_kl_mc(f, g, 1.0, trajs), WithinAbs(0.5, 1e-12));

  // Scaling sigma only rescales the prefactor; same trajectories, ratio 4.
  const double at1 = girsanov_kl_mc(f, g, 1.0, trajs);
  const double at2 = girsanov_kl_mc(f, g, 2.0, trajs);
  REQUIRE_THAT(at1 / at2, WithinAbs(4.0, 1e-12));

  REQUIRE_THROWS_AS(girsanov_kl_mc(f, g, 0.0, trajs), std::invalid_argument);
  REQUIRE_THROWS_AS(girsanov_kl_mc(f, g, 1.0, {}), std::invalid_argument);
}

TEST_CASE("the mean-reverting drift against zero drift gives a quarter nat") {
  // Stationary start, f(x) = -x, sigma = sqrt(2): the expected quadratic
  // cost is E[x^2]/4 per unit time = 1/4.
  const VelocityFn f = [](const Vec& x, double) -> Vec { return -x; };
  const VelocityFn g = [](const Vec& x, double) -> Vec {
    return Vec::Zero(x.size());
  };
  const int n_paths = 2000;
  Rng rng(21);
  Mat starts(n_paths, 1);
  for (int i = 0; i < n_paths; ++i) starts(i, 0) = rng.normal();
  const auto trajs = sde_batch(f, std::sqrt(2.0), starts, 100, 22);
  const double kl = girsanov_kl_mc(f, g, std::sqrt(2.0), trajs);
  REQUIRE(std::abs(kl - 0.25) <= 0.05 * 0.25);
}

TEST_CASE("the estimate is invariant to regrouping trajectories") {
  const VelocityFn f = [](const Vec& x, double) -> Vec { return -x; };
  const VelocityFn g = [](const Vec&, double) -> Vec {
    return Vec::Constant(1, 0.3);
  };
  const auto trajs = sde_batch(f, 1.0, normal_cloud(256, 1, 31), 25, 32);
  const double whole = girsanov_kl_mc(f, g, 1.0, trajs);
  double grouped = 0.0;
  for (int group = 0; group < 8; ++group) {
    const std::vector<Trajectory> part(trajs.begin() + group * 32,
                                       trajs.begin() + (group + 1) * 32);
    grouped += girsanov_kl_mc(f, g, 1.0, part);
  }
  grouped /= 8.0;
  REQUIRE_THAT(grouped, WithinAbs(whole, 1e-12 * (1.0 + whole)));
}

TEST_CASE("an identity jacobian produces the identity information matrix") {
  const auto trajs = sde_batch(
      [](const Vec& x, double) -> Vec { return Vec::Zero(x.size()); }, 1.0,
      Mat::Zero(3, 2), 10, 41);
  const JacobianFn jac = [](const Vec&, double) { return Mat::Identity(2, 2); };
  const FisherMatrix fisher = fisher_matrix_generic(jac, 2, trajs, 50, 42);
  REQUIRE((fisher.matrix - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(fisher.dim_params == 2);
  REQUIRE(fisher.n_mc == 50);
}

TEST_CASE("the information matrix is symmetric, reproducible, and psd") {
  const MlpParams model = mlp_init({2, 6, 1}, Activation::tanh, 51);
  const auto trajs =
      sde_batch(field_of(model), 1.0, normal_cloud(8, 1, 52), 20, 53);
  const FisherMatrix a = fisher_matrix(model, trajs, 200, 54);
  const FisherMatrix b = fisher_matrix(model, trajs, 200, 54);
  REQUIRE(a.matrix == b.matrix);
  REQUIRE(a.matrix == a.matrix.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Mat> eig(a.matrix);
  REQUIRE(eig.eigenvalues().minCoeff() > -1e-10);

  const FisherMatrix c = fisher_matrix(model, trajs, 200, 55);
  REQUIRE(a.matrix != c.matrix);
}

TEST_CASE("sampling converges to the exhaustive atom average") {
  const MlpParams model = mlp_init({2, 5, 1}, Activation::tanh, 61);
  const auto trajs =
      sde_batch(field_of(model), 1.0, normal_cloud(4, 1, 62), 10, 63);
  const FisherMatrix sampled = fisher_matrix(model, trajs, 20000, 64);

  Mat exact = Mat::Zero(model.theta.size(), model.theta.size());
  long atoms = 0;
  for (const auto& traj : trajs) {
    for (Eigen::Index i = 0; i < traj.velocities.rows(); ++i) {
      const Vec x = traj.states.row(i);
      const Mat j = param_jacobian(model, x, traj.times[i]);
      exact.noalias() += j.transpose() * j;
      ++atoms;
    }
  }
  exact /= static_cast<double>(atoms);
  const double rel = (sampled.matrix - exact).norm() / exact.norm();
  REQUIRE(rel < 0.1);
}

TEST_CASE("the quadratic form evaluates half the weighted square") {
  FisherMatrix fisher;
  fisher.dim_params = 2;
  fisher.matrix = Mat::Identity(2, 2);
  Vec d(2);
  d << 3.0, 4.0;
  REQUIRE_THAT(fisher_kl_quadratic(fisher, d), WithinAbs(12.5, 1e-12));
  REQUIRE(fisher_kl_quadratic(fisher, Vec::Zero(2)) == 0.0);
  REQUIRE_THROWS_AS(fisher_kl_quadratic(fisher, Vec::Zero(3)),
                    std::invalid_argument);
}

TEST_CASE("the quadratic form tracks the path divergence for small moves") {
  const MlpParams model = mlp_init({2, 8, 1}, Activation::tanh, 71);
  MlpParams moved = model;
  Rng rng(72);
  Vec delta(model.theta.size());
  for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = rng.normal();
  delta *= 1e-2 / delta.norm();
  moved.theta += delta;

  const auto trajs =
      sde_batch(field_of(model), 1.0, normal_cloud(64, 1, 73), 50, 74);
  const double kl = girsanov_kl_mc(field_of(model), field_of(moved), 1.0, trajs);
  const FisherMatrix fisher = fisher_matrix(model, trajs, 8000, 75);
  const double quad = fisher_kl_quadratic(fisher, delta);
  REQUIRE(kl > 0.0);
  REQUIRE(std::abs(quad - kl) <= 0.1 * kl);
}

TEST_CASE("series validation refuses malformed input") {
  REQUIRE_THROWS_AS(series_of({0, 1}, {1.0}).validate(), std::invalid_argument);
  REQUIRE_THROWS_AS(series_of({0, 0, 1}, {1.0, 2.0, 3.0}).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(
      series_of({0, 1}, {1.0, std::numeric_limits<double>::quiet_NaN()}).validate(),
      std::invalid_argument);
  REQUIRE_NOTHROW(series_of({0, 5, 7}, {1.0, 2.0, 0.5}).validate());
}

TEST_CASE("a constant series has zero instantaneous variance") {
  // Weighted-mean round-off leaves residuals at the last-bit scale.
  const auto flat = iota_series(30, [](long) { return 2.5; });
  REQUIRE(instantaneous_variance(flat, 10) < 1e-24);
}

TEST_CASE("wide-bandwidth variance of a linear window is the plain variance") {
  // One window of epochs 0..9 with values equal to epochs: population
  // variance 8.25.
  const auto ramp = iota_series(10, [](long e) { return static_cast<double>(e); });
  REQUIRE_THAT(instantaneous_variance(ramp, 10, 1e9), WithinAbs(8.25, 1e-6));
}

TEST_CASE("iid noise shows roughly unit instantaneous variance") {
  Rng rng(81);
  const auto noise = iota_series(400, [&](long) { return rng.normal(); });
  const double v = instantaneous_variance(noise, 10);
  // The gaussian window weights shrink the expectation to about 0.9.
  REQUIRE(std::abs(v - 0.9) < 0.25);
}

TEST_CASE("window and bandwidth guards") {
  const auto ramp = iota_series(10, [](long e) { return static_cast<double>(e); });
  REQUIRE_THROWS_AS(instantaneous_variance(ramp, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(instantaneous_variance(ramp, 11), std::invalid_argument);
  REQUIRE_THROWS_AS(convergence_rate(ramp, 11), std::invalid_argument);
}

TEST_CASE("convergence rate recovers exact and mixed slopes") {
  const auto steady = iota_series(40, [](long e) { return 2.0 * e + 7.0; });
  REQUIRE_THAT(convergence_rate(steady, 10), WithinAbs(2.0, 1e-12));

  const auto flat = iota_series(40, [](long) { return 1.0; });
  REQUIRE(convergence_rate(flat, 10) == 0.0);

  // Half ramp, half plateau: slope-1 windows and slope-0 windows in equal
  // number plus a few blended ones average near one half.
  const auto elbow = iota_series(50, [](long e) {
    return static_cast<double>(std::min(e, 24l));
  });
  const double rate = convergence_rate(elbow, 10);
  REQUIRE(rate > 0.4);
  REQUIRE(rate < 0.6);
}

TEST_CASE("rank correlation hits the textbook values") {
  const auto up = iota_series(10, [](long e) { return 0.1 * e; });
  REQUIRE_THAT(spearman_rho(up), WithinAbs(1.0, 1e-12));
  const auto down = iota_series(10, [](long e) { return -0.1 * e; });
  REQUIRE_THAT(spearman_rho(down), WithinAbs(-1.0, 1e-12));

  // Ranks (1, 0, 2) against (0, 1, 2): rho = 1 - 6*2/(3*8) = 0.5.
  const auto mixed = series_of({0, 1, 2}, {2.0, 1.0, 3.0});
  REQUIRE_THAT(spearman_rho(mixed), WithinAbs(0.5, 1e-12));

  const auto tied = series_of({0, 1, 2, 3}, {1.0, 1.0, 1.0, 1.0});
  const SpearmanResult r = spearman(tied);
  REQUIRE(r.degenerate);
  REQUIRE(r.rho == 0.0);

  REQUIRE_THROWS_AS(spearman(series_of({0, 1}, {1.0, 2.0})),
                    std::invalid_argument);
}

TEST_CASE("stability statistics ignore a uniform epoch offset") {
  Rng rng(91);
  auto base = iota_series(60, [&](long e) { return 0.05 * e + rng.normal(); });
  MetricsSeries shifted = base;
  for (long& e : shifted.epochs) e += 1000;

  REQUIRE(instantaneous_variance(base, 10) == instantaneous_variance(shifted, 10));
  REQUIRE(convergence_rate(base, 10) == convergence_rate(shifted, 10));
  REQUIRE(spearman_rho(base) == spearman_rho(shifted));
}
