#pragma once

// Training losses over coupled minibatches: plain conditional flow matching
// and its anchored variant that adds a pull toward a frozen base field, plus
// the pointwise optimal drift that the anchored loss is minimized by.
//
// Both losses draw per-row times (and optional path noise) from the same
// seeded streams, so the anchored loss at beta = 0 reproduces the plain loss
// bit for bit. Reported losses omit the conventional 1/2 prefactor.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "gradflow/coupling.hpp"
#include "gradflow/mlp.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

enum class ObjectiveKind { cfm, gft };

inline std::string to_string(ObjectiveKind k) {
  return k == ObjectiveKind::cfm ? "cfm" : "gft";
}

inline ObjectiveKind parse_objective_kind(const std::string& name) {
  if (name == "cfm") return ObjectiveKind::cfm;
  if (name == "gft") return ObjectiveKind::gft;
  throw std::invalid_argument("unknown objective kind: " + name);
}

// Loss configuration. sigma = 0 keeps interpolation paths deterministic;
// sigma > 0 perturbs them with Gaussian noise under an envelope that
// vanishes at both endpoints. Times are always uniform on [0, 1].
struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::cfm;
  double beta = 0.0;
  double sigma = 0.0;

  void validate() const {
    if (beta < 0.0) throw std::invalid_argument("objective: beta < 0");
    if (sigma < 0.0) throw std::invalid_argument("objective: sigma < 0");
  }
};

// Noise envelope for perturbed paths; pins x_t to the data at t=0 and t=1.
inline double noise_envelope(double t) { return std::sqrt(t * (1.0 - t)); }

// Linear interpolation point and its constant conditional velocity.
inline std::pair<Vec, Vec> conditional_target_u(const Vec& x0, const Vec& x1,
                                                double t) {
  return {(1.0 - t) * x0 + t * x1, x1 - x0};
}

// Perturbed-path variant. With sigma = 0 no draws are consumed and the
// result matches the deterministic overload exactly.
inline std::pair<Vec, Vec> conditional_target_u(const Vec& x0, const Vec& x1,
                                                double t, double sigma,
                                                Rng& rng) {
  auto [xt, u] = conditional_target_u(x0, x1, t);
  if (sigma > 0.0) {
    const double std_t = sigma * noise_envelope(t);
    for (Eigen::Index k = 0; k < xt.size(); ++k)
      xt[k] += std_t * rng.normal();
  }
  return {std::move(xt), std::move(u)};
}

// One evaluation point per coupled row: time, interpolated state, and the
// conditional velocity target.
struct TrainingPoints {
  Mat xt;
  Vec t;
  Mat u;
};

// Row i draws from its own derived stream, so the points depend only on
// (batch, sigma, seed), not on what else consumed randomness.
inline TrainingPoints build_training_points(const CoupledBatch& batch,
                                            double sigma, std::uint64_t seed) {
  const Eigen::Index n = batch.x0.rows();
  if (n == 0) throw std::invalid_argument("training points: empty batch");
  TrainingPoints pts;
  pts.xt.resize(n, batch.x0.cols());
  pts.t.resize(n);
  pts.u.resize(n, batch.x0.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    Rng rng(mix64(seed, static_cast<std::uint64_t>(i), /*b=*/3));
    const double t = rng.uniform();
    const Vec x0 = batch.x0.row(i);
    const Vec x1 = batch.x1.row(i);
    auto [xt, u] = conditional_target_u(x0, x1, t, sigma, rng);
    pts.t[i] = t;
    pts.xt.row(i) = xt;
    pts.u.row(i) = u;
  }
  return pts;
}

namespace detail {

// Shared loss core. base == nullptr or beta == 0 skips the anchor term
// entirely, which is what makes the beta = 0 reduction exact. The model may
// carry a low-rank adapter; the base never does.
inline double interpolation_loss(const MlpParams& model,
                                 const LoraAdapter* adapter,
                                 const MlpParams* base,
                                 const CoupledBatch& batch, double beta,
                                 double sigma, std::uint64_t seed) {
  if (beta < 0.0) throw std::invalid_argument("loss: beta < 0");
  validate_params(model);
  if (adapter) validate_adapter(model, *adapter);
  if (base) validate_params(*base);
  const TrainingPoints pts = build_training_points(batch, sigma, seed);
  const Eigen::Index n = pts.t.size();
  const bool anchored = base != nullptr && beta > 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec xi = pts.xt.row(i);
    const Vec v = forward_traced(model, adapter, xi, pts.t[i], nullptr);
    if (!v.allFinite()) throw NonFiniteError("loss: non-finite model output");
    const Vec u = pts.u.row(i);
    double term = (v - u).squaredNorm();
    if (anchored) {
      const Vec vb = forward_traced(*base, nullptr, xi, pts.t[i], nullptr);
      if (!vb.allFinite()) throw NonFiniteError("loss: non-finite base output");
      term += beta * (v - vb).squaredNorm();
    }
    total += term;
  }
  return total / static_cast<double>(n);
}

}  // namespace detail

// Mean over rows of |v(x_t, t) - u|^2 with per-row uniform times.
inline double cfm_loss(const MlpParams& model, const CoupledBatch& batch,
                       std::uint64_t seed, double sigma = 0.0) {
  return detail::interpolation_loss(model, nullptr, nullptr, batch, 0.0,
                                    sigma, seed);
}

// Mean over rows of |v - u|^2 + beta |v - v_base|^2, both terms sharing the
// same (t, x_t) draw. The base model is evaluated, never differentiated.
inline double gft_loss(const MlpParams& model, const MlpParams& base,
                       const CoupledBatch& batch, double beta,
                       std::uint64_t seed, double sigma = 0.0) {
  return detail::interpolation_loss(model, nullptr, &base, batch, beta, sigma,
                                    seed);
}

// The unique minimizer of |v - v_q|^2 + beta |v - v_base|^2 over v: a convex
// combination whose weights 1/(1+beta) and beta/(1+beta) sum to one.
inline Vec optimal_drift(const Vec& v_q, const Vec& v_base, double beta) {
  if (beta < 0.0) throw std::invalid_argument("optimal_drift: beta < 0");
  return (v_q + beta * v_base) / (1.0 + beta);
}

inline VelocityFn optimal_drift_field(VelocityFn v_q, VelocityFn v_base,
                                      double beta) {
  if (beta < 0.0) throw std::invalid_argument("optimal_drift: beta < 0");
  return [vq = std::move(v_q), vb = std::move(v_base), beta](const Vec& x,
                                                             double t) {
    return optimal_drift(vq(x, t), vb(x, t), beta);
  };
}

// Output-space objective for the gradient path: given precomputed targets u
// and (optionally) frozen base outputs, returns mean |v-u|^2 + beta|v-vb|^2
// and its derivative in v. Pass beta = 0 (base ignored) for the plain loss.
inline OutputObjective anchored_square_objective(Mat u, Mat base_v,
                                                 double beta) {
  if (beta < 0.0) throw std::invalid_argument("objective: beta < 0");
  return [u = std::move(u), base_v = std::move(base_v),
          beta](const Mat& v, Mat& dv) {
    const double n = static_cast<double>(v.rows());
    double loss = (v - u).rowwise().squaredNorm().sum() / n;
    dv = (2.0 / n) * (v - u);
    if (beta > 0.0) {
      loss += beta * (v - base_v).rowwise().squaredNorm().sum() / n;
      dv += (2.0 * beta / n) * (v - base_v);
    }
    return loss;
  };
}

}  // namespace gradflow
