#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "gradflow/coupling.hpp"
#include "gradflow/objectives.hpp"
#include "gradflow/rng.hpp"
#include "support.hpp"

using namespace gradflow;
using Catch::Matchers::WithinAbs;

namespace {

Mat random_batch(int n, int dim, std::uint64_t seed) {
  Rng rng(seed);
  Mat x(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = rng.normal();
  return x;
}

CoupledBatch paired(const Mat& x0, const Mat& x1) {
  CoupledBatch batch;
  batch.x0 = x0;
  batch.x1 = x1;
  batch.kind = CouplingKind::independent;
  batch.transport_cost = batch.recompute_cost();
  return batch;
}

// Batch whose displacement x1 - x0 is the same vector c on every row, so the
// conditional velocity target is the constant c everywhere. Small-integer
// endpoints plus a dyadic c keep x1 - x0 == c exact in floating point.
CoupledBatch constant_displacement_batch(int n, const Vec& c, std::uint64_t seed) {
  Rng rng(seed);
  Mat x0(n, c.size());
  for (int i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < c.size(); ++j)
      x0(i, j) = static_cast<double>(rng.uniform_int(9)) - 4.0;
  const Mat x1 = x0.rowwise() + c.transpose();
  return paired(x0, x1);
}

}  // namespace

TEST_CASE("conditional targets interpolate linearly") {
  Vec x0(2), x1(2);
  x0 << 0.0, 0.0;
  x1 << 2.0, 0.0;

  const auto [at0, u0] = conditional_target_u(x0, x1, 0.0);
  REQUIRE(at0 == x0);
  REQUIRE(u0 == x1 - x0);

  const auto [at1, u1] = conditional_target_u(x0, x1, 1.0);
  REQUIRE(at1 == x1);

  const auto [mid, umid] = conditional_target_u(x0, x1, 0.5);
  REQUIRE(mid[0] == 1.0);
  REQUIRE(mid[1] == 0.0);
  REQUIRE(umid == u0);  // the target does not depend on t
}

TEST_CASE("the noise envelope vanishes at the endpoints") {
  REQUIRE(noise_envelope(0.0) == 0.0);
  REQUIRE(noise_envelope(1.0) == 0.0);
  REQUIRE_THAT(noise_envelope(0.5), WithinAbs(0.5, 1e-15));
}

TEST_CASE("noisy paths stay pinned to the data at the endpoints") {
  Vec x0(2), x1(2);
  x0 << 1.0, -1.0;
  x1 << 0.5, 2.0;
  Rng rng(4);
  for (double t : {0.0, 1.0}) {
    const auto [noisy, u] = conditional_target_u(x0, x1, t, 1.5, rng);
    const auto [clean, u2] = conditional_target_u(x0, x1, t);
    REQUIRE(noisy == clean);
    REQUIRE(u == u2);
  }
}

TEST_CASE("sigma zero consumes no randomness") {
  Vec x0 = Vec::Zero(2), x1 = Vec::Ones(2);
  Rng used(77), untouched(77);
  conditional_target_u(x0, x1, 0.4, 0.0, used);
  REQUIRE(used.next_u64() == untouched.next_u64());
}

TEST_CASE("training points depend only on the row index") {
  const CoupledBatch big = paired(random_batch(8, 2, 1), random_batch(8, 2, 2));
  CoupledBatch small = big;
  small.x0 = big.x0.topRows(4);
  small.x1 = big.x1.topRows(4);
  const TrainingPoints a = build_training_points(big, 0.3, 55);
  const TrainingPoints b = build_training_points(small, 0.3, 55);
  REQUIRE(a.xt.topRows(4) == b.xt);
  REQUIRE(a.t.head(4) == b.t);
  REQUIRE(a.u.topRows(4) == b.u);
  for (int i = 0; i < 8; ++i) {
    REQUIRE(a.t[i] >= 0.0);
    REQUIRE(a.t[i] < 1.0);
  }
  // Same call twice is identical; a different seed moves the times.
  const TrainingPoints c = build_training_points(big, 0.3, 55);
  REQUIRE(a.t == c.t);
  REQUIRE(a.xt == c.xt);
  const TrainingPoints d = build_training_points(big, 0.3, 56);
  REQUIRE(a.t != d.t);
}

TEST_CASE("a field matching the constant displacement has zero loss") {
  Vec c(2);
  c << 1.25, -0.5;
  const CoupledBatch batch = constant_displacement_batch(10, c, 61);
  const MlpParams match = testing::constant_model(2, c);
  REQUIRE(cfm_loss(match, batch, 123) == 0.0);

  const MlpParams silent = testing::constant_model(2, Vec::Zero(2));
  REQUIRE_THAT(cfm_loss(silent, batch, 123), WithinAbs(c.squaredNorm(), 1e-12));
}

TEST_CASE("the anchored loss at beta zero is the plain loss, bit for bit") {
  const MlpParams model = mlp_init({3, 8, 2}, Activation::tanh, 71);
  const MlpParams base = mlp_init({3, 8, 2}, Activation::tanh, 72);
  const CoupledBatch batch = paired(random_batch(12, 2, 73), random_batch(12, 2, 74));
  for (double sigma : {0.0, 0.8}) {
    const double a = gft_loss(model, base, batch, 0.0, 99, sigma);
    const double b = cfm_loss(model, batch, 99, sigma);
    REQUIRE(a == b);
  }
}

TEST_CASE("the anchored loss at the optimal constant field has a closed form") {
  Vec c0(2), c1(2);
  c0 << -1.0, 2.0;
  c1 << 3.0, 0.5;
  const CoupledBatch batch = constant_displacement_batch(6, c1, 81);
  const MlpParams base = testing::constant_model(2, c0);
  for (double beta : {0.5, 1.0, 2.0}) {
    const MlpParams at_optimum =
        testing::constant_model(2, optimal_drift(c1, c0, beta));
    const double expected = beta / (1.0 + beta) * (c1 - c0).squaredNorm();
    REQUIRE_THAT(gft_loss(at_optimum, base, batch, beta, 5), WithinAbs(expected, 1e-12));
  }
  // When target, base, and model all agree the loss is exactly zero.
  const MlpParams same = testing::constant_model(2, c1);
  REQUIRE(gft_loss(same, same, constant_displacement_batch(6, c1, 82), 3.0, 5) == 0.0);
}

TEST_CASE("optimal drift is the stated convex combination") {
  Vec vq(2), vb(2);
  vq << 4.0, -2.0;
  vb << 1.0, 1.0;
  REQUIRE(optimal_drift(vq, vb, 0.0) == vq);
  REQUIRE((optimal_drift(vq, vb, 1e12) - vb).norm() < 1e-9);
  const Vec mid = optimal_drift(vq, vb, 1.0);
  REQUIRE_THAT(mid[0], WithinAbs(2.5, 1e-15));
  REQUIRE_THAT(mid[1], WithinAbs(-0.5, 1e-15));
  const Vec third = optimal_drift(vq, vb, 2.0);
  REQUIRE_THAT(third[0], WithinAbs(2.0, 1e-15));
  REQUIRE_THROWS_AS(optimal_drift(vq, vb, -0.1), std::invalid_argument);
}

TEST_CASE("no point on a dense grid beats the closed-form minimizer") {
  const double u = 1.3, vb = -0.8;
  for (double beta : {0.3, 1.0, 4.0}) {
    const double vstar = optimal_drift(Vec::Constant(1, u), Vec::Constant(1, vb), beta)[0];
    const auto phi = [&](double v) {
      return (v - u) * (v - u) + beta * (v - vb) * (v - vb);
    };
    double best = std::numeric_limits<double>::infinity();
    for (double v = -2.0; v <= 2.0; v += 1e-3) best = std::min(best, phi(v));
    REQUIRE(phi(vstar) <= best + 1e-12);
  }
}

TEST_CASE("the anchored loss is linear in beta with slope the anchor gap") {
  const MlpParams model = mlp_init({3, 8, 2}, Activation::tanh, 91);
  const MlpParams base = mlp_init({3, 8, 2}, Activation::tanh, 92);
  const CoupledBatch batch = paired(random_batch(16, 2, 93), random_batch(16, 2, 94));
  const std::uint64_t seed = 17;

  const double l1 = gft_loss(model, base, batch, 0.5, seed);
  const double l2 = gft_loss(model, base, batch, 1.5, seed);
  const double l3 = gft_loss(model, base, batch, 3.0, seed);
  const double slope_a = (l2 - l1) / 1.0;
  const double slope_b = (l3 - l2) / 1.5;
  REQUIRE_THAT(slope_b, WithinAbs(slope_a, 1e-9 * (1.0 + std::abs(slope_a))));

  const TrainingPoints pts = build_training_points(batch, 0.0, seed);
  double anchor = 0.0;
  for (int i = 0; i < 16; ++i) {
    const Vec xi = pts.xt.row(i);
    anchor += (forward(model, xi, pts.t[i]) - forward(base, xi, pts.t[i])).squaredNorm();
  }
  anchor /= 16.0;
  REQUIRE_THAT(slope_a, WithinAbs(anchor, 1e-9 * (1.0 + anchor)));
}

TEST_CASE("the anchored output objective returns exact values and slopes") {
  Mat u(2, 2), vb(2, 2), v(2, 2);
  u << 1.0, 0.0, 0.0, 1.0;
  vb << 0.5, 0.5, 0.5, 0.5;
  v << 2.0, 1.0, -1.0, 0.0;
  const double beta = 2.0;

  Mat dv = Mat::Zero(2, 2);
  const double loss = anchored_square_objective(u, vb, beta)(v, dv);
  const double plain = ((v - u).rowwise().squaredNorm().sum()) / 2.0;
  const double anchor = ((v - vb).rowwise().squaredNorm().sum()) / 2.0;
  REQUIRE_THAT(loss, WithinAbs(plain + beta * anchor, 1e-12));
  const Mat expected_dv = (v - u) + beta * (v - vb);  // 2/n with n=2 gives 1
  REQUIRE((dv - expected_dv).cwiseAbs().maxCoeff() < 1e-12);

  Mat dv0 = Mat::Zero(2, 2);
  const double loss0 = anchored_square_objective(u, Mat(), 0.0)(v, dv0);
  REQUIRE_THAT(loss0, WithinAbs(plain, 1e-12));
  REQUIRE((dv0 - (v - u)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("objective configuration validates and names round-trip") {
  ObjectiveSpec spec;
  spec.kind = ObjectiveKind::gft;
  spec.beta = -1.0;
  REQUIRE_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.beta = 1.0;
  spec.sigma = -0.1;
  REQUIRE_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.sigma = 0.0;
  REQUIRE_NOTHROW(spec.validate());
  REQUIRE(parse_objective_kind("cfm") == ObjectiveKind::cfm);
  REQUIRE(parse_objective_kind(to_string(ObjectiveKind::gft)) == ObjectiveKind::gft);
  REQUIRE_THROWS_AS(parse_objective_kind("mse"), std::invalid_argument);
}

namespace {

// Finitely supported coupling over source atoms a, target atoms b, and a
// fixed time grid. Every (pair, time) cell becomes one weighted evaluation
// point for the conditional loss; cells that land on the same (x, t) are
// merged for the marginal loss, with the target replaced by the weighted
// mean of their conditional targets.
struct EnumeratedAtoms {
  std::vector<double> x;
  std::vector<double> t;
  std::vector<double> u;
  std::vector<double> w;
};

EnumeratedAtoms conditional_atoms(const std::vector<double>& a,
                                  const std::vector<double>& b,
                                  const Mat& plan,
                                  const std::vector<double>& times) {
  EnumeratedAtoms out;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double p = plan(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (p == 0.0) continue;
      for (double t : times) {
        out.x.push_back((1.0 - t) * a[i] + t * b[j]);
        out.t.push_back(t);
        out.u.push_back(b[j] - a[i]);
        out.w.push_back(p / static_cast<double>(times.size()));
      }
    }
  return out;
}

EnumeratedAtoms marginalize(const EnumeratedAtoms& atoms) {
  std::map<std::pair<double, double>, std::pair<double, double>> groups;  // (x,t) -> (w, w*u)
  for (std::size_t k = 0; k < atoms.x.size(); ++k) {
    auto& g = groups[{atoms.x[k], atoms.t[k]}];
    g.first += atoms.w[k];
    g.second += atoms.w[k] * atoms.u[k];
  }
  EnumeratedAtoms out;
  for (const auto& [key, g] : groups) {
    out.x.push_back(key.first);
    out.t.push_back(key.second);
    out.u.push_back(g.second / g.first);
    out.w.push_back(g.first);
  }
  return out;
}

// Weighted squared-error loss over enumerated atoms, differentiated through
// the network.
GradResult atom_gradient(const MlpParams& model, const EnumeratedAtoms& atoms) {
  const int n = static_cast<int>(atoms.x.size());
  Mat x(n, 1);
  Vec t(n);
  for (int k = 0; k < n; ++k) {
    x(k, 0) = atoms.x[static_cast<std::size_t>(k)];
    t[k] = atoms.t[static_cast<std::size_t>(k)];
  }
  const auto objective = [&](const Mat& v, Mat& dv) {
    double loss = 0.0;
    for (int k = 0; k < n; ++k) {
      const double r = v(k, 0) - atoms.u[static_cast<std::size_t>(k)];
      loss += atoms.w[static_cast<std::size_t>(k)] * r * r;
      dv(k, 0) = 2.0 * atoms.w[static_cast<std::size_t>(k)] * r;
    }
    return loss;
  };
  return loss_and_grad(model, nullptr, x, t, objective);
}

}  // namespace

TEST_CASE("conditional and marginal losses share their gradient") {
  // Integer atoms and dyadic times keep colliding interpolation points
  // exactly equal, so the grouping in marginalize() is exact.
  const std::vector<double> a = {0.0, 2.0, 4.0};
  const std::vector<double> b = {6.0, 4.0, 2.0};
  const std::vector<double> times = {0.25, 0.5, 0.75};
  const MlpParams model = mlp_init({2, 8, 1}, Activation::tanh, 121);

  const Mat uniform = Mat::Constant(3, 3, 1.0 / 9.0);
  Mat assignment = Mat::Zero(3, 3);  // the reversal is the optimal pairing
  assignment(0, 2) = assignment(1, 1) = assignment(2, 0) = 1.0 / 3.0;

  for (const Mat& plan : {uniform, assignment}) {
    const EnumeratedAtoms cond = conditional_atoms(a, b, plan, times);
    const EnumeratedAtoms marg = marginalize(cond);
    const GradResult gc = atom_gradient(model, cond);
    const GradResult gm = atom_gradient(model, marg);
    REQUIRE((gc.grad_theta - gm.grad_theta).cwiseAbs().maxCoeff() < 1e-6);
    // Their values differ by the mean conditional variance, which is
    // nonnegative and independent of the model.
    REQUIRE(gc.loss >= gm.loss - 1e-12);
  }

  // The uniform plan really does produce collisions at t = 1/2.
  const EnumeratedAtoms merged = marginalize(conditional_atoms(a, b, uniform, times));
  REQUIRE(merged.x.size() < conditional_atoms(a, b, uniform, times).x.size());
}
