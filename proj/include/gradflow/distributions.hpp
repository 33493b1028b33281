// Synthetic distribution zoo: seeded samplers, analytic log-densities and
// scores where they exist, and shifted source/target pairs for emulating
// small and large distribution shifts.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

enum class DistKind { gaussian, gaussian_mixture, two_moons, checkerboard };

inline const char* to_string(DistKind k) {
  switch (k) {
    case DistKind::gaussian: return "gaussian";
    case DistKind::gaussian_mixture: return "gaussian_mixture";
    case DistKind::two_moons: return "two_moons";
    case DistKind::checkerboard: return "checkerboard";
  }
  return "?";
}

// Thrown when an analytic quantity is requested for a kind that has none.
class UnsupportedKindError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A validated synthetic law. Covariances are diagonal throughout; the
// two_moons and checkerboard recipes are fixed generative procedures
// (documented at their samplers) with an optional rigid offset/rotation.
struct DistributionSpec {
  DistKind kind = DistKind::gaussian;
  int dim = 0;

  // gaussian
  Vec mean;
  Vec var;

  // gaussian_mixture (diagonal components)
  std::vector<Vec> means;
  std::vector<Vec> vars;
  Vec weights;

  // two_moons / checkerboard
  double noise = 0.0;      // two_moons additive noise std
  double rotation = 0.0;   // radians, about the origin, 2-D only
  Vec offset;              // rigid translation applied after generation

  void validate() const;
};

namespace detail {

constexpr double kWeightSumTol = 1e-12;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void check_variances(const Vec& v, int dim, const char* what) {
  require(v.size() == dim, std::string(what) + ": variance size != dim");
  for (int i = 0; i < v.size(); ++i)
    require(v[i] > 0.0, std::string(what) + ": variance entries must be > 0");
}

}  // namespace detail

inline void DistributionSpec::validate() const {
  detail::require(dim >= 1, "dim must be >= 1");
  switch (kind) {
    case DistKind::gaussian:
      detail::require(mean.size() == dim, "gaussian: mean size != dim");
      detail::check_variances(var, dim, "gaussian");
      break;
    case DistKind::gaussian_mixture: {
      const auto k = means.size();
      detail::require(k >= 1, "mixture: needs >= 1 component");
      detail::require(vars.size() == k, "mixture: means/vars count mismatch");
      detail::require(static_cast<std::size_t>(weights.size()) == k,
                      "mixture: weights count mismatch");
      double sum = 0.0;
      for (int i = 0; i < weights.size(); ++i) {
        detail::require(weights[i] >= 0.0, "mixture: weights must be >= 0");
        sum += weights[i];
      }
      detail::require(std::abs(sum - 1.0) <= detail::kWeightSumTol,
                      "mixture: weights must sum to 1");
      for (std::size_t i = 0; i < k; ++i) {
        detail::require(means[i].size() == dim, "mixture: component mean size != dim");
        detail::check_variances(vars[i], dim, "mixture");
      }
      break;
    }
    case DistKind::two_moons:
      detail::require(dim == 2, "two_moons: dim must be 2");
      detail::require(noise >= 0.0, "two_moons: noise must be >= 0");
      break;
    case DistKind::checkerboard:
      detail::require(dim == 2, "checkerboard: dim must be 2");
      break;
  }
  if (offset.size() != 0)
    detail::require(offset.size() == dim, "offset size != dim");
  if (rotation != 0.0)
    detail::require(dim == 2, "rotation only supported in 2-D");
}

// ---------------------------------------------------------------------------
// Factories
// ---------------------------------------------------------------------------

inline DistributionSpec make_gaussian(const Vec& mean, const Vec& var) {
  DistributionSpec s;
  s.kind = DistKind::gaussian;
  s.dim = static_cast<int>(mean.size());
  s.mean = mean;
  s.var = var;
  s.validate();
  return s;
}

inline DistributionSpec make_isotropic_gaussian(const Vec& mean, double var) {
  return make_gaussian(mean, Vec::Constant(mean.size(), var));
}

inline DistributionSpec make_gaussian_mixture(std::vector<Vec> means, std::vector<Vec> vars,
                                              const Vec& weights) {
  DistributionSpec s;
  s.kind = DistKind::gaussian_mixture;
  s.dim = means.empty() ? 0 : static_cast<int>(means[0].size());
  s.means = std::move(means);
  s.vars = std::move(vars);
  s.weights = weights;
  s.validate();
  return s;
}

// k equal-weight isotropic components spaced evenly on a circle of the
// given radius; the conventional "Gaussian ring" testbed.
inline DistributionSpec make_gaussian_ring(int components, double radius, double var) {
  detail::require(components >= 1, "ring: components must be >= 1");
  std::vector<Vec> means, vars;
  for (int i = 0; i < components; ++i) {
    const double angle = 2.0 * std::numbers::pi * i / components;
    Vec m(2);
    m << radius * std::cos(angle), radius * std::sin(angle);
    means.push_back(m);
    vars.push_back(Vec::Constant(2, var));
  }
  return make_gaussian_mixture(std::move(means), std::move(vars),
                               Vec::Constant(components, 1.0 / components));
}

inline DistributionSpec make_two_moons(double noise, double rotation = 0.0,
                                       const Vec& offset = Vec()) {
  DistributionSpec s;
  s.kind = DistKind::two_moons;
  s.dim = 2;
  s.noise = noise;
  s.rotation = rotation;
  s.offset = offset;
  s.validate();
  return s;
}

inline DistributionSpec make_checkerboard(const Vec& offset = Vec()) {
  DistributionSpec s;
  s.kind = DistKind::checkerboard;
  s.dim = 2;
  s.offset = offset;
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {

// Row streams: every sample row i owns two derived substreams, one for
// discrete choices (mixture component, moon, cell) and one for continuous
// values. Keeping them separate makes a degenerate mixture reproduce the
// single-component sampler bit for bit under the same seed.
inline Rng value_stream(std::uint64_t seed, std::uint64_t row) {
  return Rng(mix64(seed, row, 0));
}
inline Rng choice_stream(std::uint64_t seed, std::uint64_t row) {
  return Rng(mix64(seed, row, 1));
}

// Rows of a column-major Mat have non-unit inner stride, hence the
// explicit InnerStride in the Ref.
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

inline void gaussian_row(Rng& values, const Vec& mean, const Vec& var, RowRef out) {
  for (int j = 0; j < mean.size(); ++j)
    out[j] = mean[j] + std::sqrt(var[j]) * values.normal();
}

inline void apply_rigid(const DistributionSpec& spec, RowRef out) {
  if (spec.rotation != 0.0) {
    const double c = std::cos(spec.rotation), s = std::sin(spec.rotation);
    const double x = out[0], y = out[1];
    out[0] = c * x - s * y;
    out[1] = s * x + c * y;
  }
  if (spec.offset.size() != 0) out += spec.offset.transpose();
}

}  // namespace detail

// n i.i.d. rows; identical (spec, seed) gives identical output regardless
// of batch splits because each row derives its own stream.
inline Mat sample(const DistributionSpec& spec, int n, std::uint64_t seed) {
  detail::require(n >= 1, "sample: n must be >= 1");
  Mat out(n, spec.dim);
  for (int i = 0; i < n; ++i) {
    Rng values = detail::value_stream(seed, static_cast<std::uint64_t>(i));
    auto row = out.row(i);
    switch (spec.kind) {
      case DistKind::gaussian:
        detail::gaussian_row(values, spec.mean, spec.var, row);
        break;
      case DistKind::gaussian_mixture: {
        Rng choice = detail::choice_stream(seed, static_cast<std::uint64_t>(i));
        const double u = choice.uniform();
        double acc = 0.0;
        int k = static_cast<int>(spec.means.size()) - 1;
        for (int c = 0; c < static_cast<int>(spec.weights.size()); ++c) {
          acc += spec.weights[c];
          if (u < acc) {
            k = c;
            break;
          }
        }
        detail::gaussian_row(values, spec.means[k], spec.vars[k], row);
        break;
      }
      case DistKind::two_moons: {
        // Radius-1 half circles: upper moon (cos a, sin a), lower moon
        // (1 - cos a, 1/2 - sin a) for a ~ U[0, pi], plus N(0, noise^2 I).
        Rng choice = detail::choice_stream(seed, static_cast<std::uint64_t>(i));
        const bool lower = choice.uniform() < 0.5;
        const double a = std::numbers::pi * values.uniform();
        double x = std::cos(a), y = std::sin(a);
        if (lower) {
          x = 1.0 - x;
          y = 0.5 - y;
        }
        row[0] = x + spec.noise * values.normal();
        row[1] = y + spec.noise * values.normal();
        break;
      }
      case DistKind::checkerboard: {
        // 4x4 grid of unit cells tiling [-2,2]^2; the 8 cells with even
        // (i+j) are active and equally likely; uniform within a cell.
        Rng choice = detail::choice_stream(seed, static_cast<std::uint64_t>(i));
        const int cell = choice.uniform_int(8);
        const int a = cell / 2;                    // grid row 0..3
        const int b = 2 * (cell % 2) + (a % 2 == 0 ? 0 : 1);  // active column
        row[0] = -2.0 + b + values.uniform();
        row[1] = -2.0 + a + values.uniform();
        break;
      }
    }
    detail::apply_rigid(spec, row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analytic density and score (gaussian and gaussian_mixture only)
// ---------------------------------------------------------------------------

namespace detail {

inline double gaussian_log_density(const Vec& x, const Vec& mean, const Vec& var) {
  double acc = 0.0;
  for (int j = 0; j < x.size(); ++j) {
    const double d = x[j] - mean[j];
    acc += -0.5 * (std::log(2.0 * std::numbers::pi * var[j]) + d * d / var[j]);
  }
  return acc;
}

}  // namespace detail

inline double log_density(const DistributionSpec& spec, const Vec& x) {
  detail::require(x.size() == spec.dim, "log_density: x size != dim");
  switch (spec.kind) {
    case DistKind::gaussian:
      return detail::gaussian_log_density(x, spec.mean, spec.var);
    case DistKind::gaussian_mixture: {
      double max_term = -std::numeric_limits<double>::infinity();
      std::vector<double> terms(spec.means.size());
      for (std::size_t k = 0; k < spec.means.size(); ++k) {
        terms[k] = (spec.weights[static_cast<int>(k)] > 0.0
                        ? std::log(spec.weights[static_cast<int>(k)]) +
                              detail::gaussian_log_density(x, spec.means[k], spec.vars[k])
                        : -std::numeric_limits<double>::infinity());
        max_term = std::max(max_term, terms[k]);
      }
      double sum = 0.0;
      for (double t : terms) sum += std::exp(t - max_term);
      return max_term + std::log(sum);
    }
    default:
      throw UnsupportedKindError(std::string("log_density: no analytic density for ") +
                                 to_string(spec.kind));
  }
}

inline Vec score(const DistributionSpec& spec, const Vec& x) {
  detail::require(x.size() == spec.dim, "score: x size != dim");
  switch (spec.kind) {
    case DistKind::gaussian:
      return (-(x - spec.mean).array() / spec.var.array()).matrix();
    case DistKind::gaussian_mixture: {
      // Responsibility-weighted component scores, accumulated in log space.
      std::vector<double> logits(spec.means.size());
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < spec.means.size(); ++k) {
        logits[k] = (spec.weights[static_cast<int>(k)] > 0.0
                         ? std::log(spec.weights[static_cast<int>(k)]) +
                               detail::gaussian_log_density(x, spec.means[k], spec.vars[k])
                         : -std::numeric_limits<double>::infinity());
        max_logit = std::max(max_logit, logits[k]);
      }
      double denom = 0.0;
      for (double l : logits) denom += std::exp(l - max_logit);
      Vec out = Vec::Zero(spec.dim);
      for (std::size_t k = 0; k < spec.means.size(); ++k) {
        const double resp = std::exp(logits[k] - max_logit) / denom;
        if (resp == 0.0) continue;
        out += resp * (-(x - spec.means[k]).array() / spec.vars[k].array()).matrix();
      }
      return out;
    }
    default:
      throw UnsupportedKindError(std::string("score: no analytic score for ") +
                                 to_string(spec.kind));
  }
}

// ---------------------------------------------------------------------------
// Shift pairs
// ---------------------------------------------------------------------------

// Declarative shift applied to a base law to produce a fine-tuning target:
// rigid translation, variance scaling, mixture reweighting, and (2-D)
// rotation. Magnitude is the caller's knob for "in-domain" vs
// "cross-domain" severity.
struct ShiftSpec {
  Vec translation;        // empty = none
  double var_scale = 1.0; // multiplies all variances (> 0)
  Vec new_weights;        // empty = keep; mixture only
  double rotation = 0.0;  // radians, 2-D only
};

inline std::pair<DistributionSpec, DistributionSpec> make_shift_pair(
    const DistributionSpec& base, const ShiftSpec& shift) {
  base.validate();
  detail::require(shift.var_scale > 0.0, "shift: var_scale must be > 0");
  if (shift.translation.size() != 0)
    detail::require(shift.translation.size() == base.dim, "shift: translation size != dim");

  DistributionSpec q = base;
  const bool rotate = shift.rotation != 0.0;
  const double c = std::cos(shift.rotation), s = std::sin(shift.rotation);
  auto rotate2 = [&](Vec& v) {
    const double x = v[0], y = v[1];
    v[0] = c * x - s * y;
    v[1] = s * x + c * y;
  };
  if (rotate) detail::require(base.dim == 2, "shift: rotation only supported in 2-D");

  switch (base.kind) {
    case DistKind::gaussian:
      if (rotate) rotate2(q.mean);
      if (shift.translation.size() != 0) q.mean += shift.translation;
      q.var *= shift.var_scale;
      detail::require(shift.new_weights.size() == 0, "shift: weights only apply to mixtures");
      break;
    case DistKind::gaussian_mixture:
      for (auto& m : q.means) {
        if (rotate) rotate2(m);
        if (shift.translation.size() != 0) m += shift.translation;
      }
      for (auto& v : q.vars) v *= shift.var_scale;
      if (shift.new_weights.size() != 0) q.weights = shift.new_weights;
      break;
    case DistKind::two_moons:
      q.rotation += shift.rotation;
      if (shift.translation.size() != 0) {
        if (q.offset.size() == 0) q.offset = Vec::Zero(2);
        q.offset += shift.translation;
      }
      q.noise *= std::sqrt(shift.var_scale);
      detail::require(shift.new_weights.size() == 0, "shift: weights only apply to mixtures");
      break;
    case DistKind::checkerboard:
      detail::require(!rotate, "shift: checkerboard rotation not supported");
      detail::require(shift.var_scale == 1.0, "shift: checkerboard has no variance");
      if (shift.translation.size() != 0) {
        if (q.offset.size() == 0) q.offset = Vec::Zero(2);
        q.offset += shift.translation;
      }
      break;
  }
  q.validate();
  return {base, q};
}

}  // namespace gradflow
