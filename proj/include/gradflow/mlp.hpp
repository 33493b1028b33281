#pragma once

// Small fully connected network v(x, t) with hand-written reverse-mode
// gradients, plus low-rank adapters for constrained fine-tuning. Time enters
// by concatenation, so the input layer is one wider than the data dimension.
// All math is double precision; layers keep weights row-count = outputs.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

enum class Activation { tanh, silu };

inline std::string to_string(Activation a) {
  return a == Activation::tanh ? "tanh" : "silu";
}

inline Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "silu") return Activation::silu;
  throw std::invalid_argument("unknown activation: " + name);
}

// Layer widths and one flat parameter vector. Layout: every layer's weight
// block first (layer order, column-major within a block), then every bias
// block in layer order.
struct MlpParams {
  std::vector<int> arch;  // input width (data dim + 1) ... output width
  Activation activation = Activation::tanh;
  Vec theta;

  int input_dim() const { return arch.front() - 1; }
  int output_dim() const { return arch.back(); }
  int layer_count() const { return static_cast<int>(arch.size()) - 1; }
};

inline void validate_arch(const std::vector<int>& arch) {
  if (arch.size() < 3)
    throw std::invalid_argument("mlp: need at least one hidden layer");
  for (int w : arch)
    if (w < 1) throw std::invalid_argument("mlp: zero-width layer");
}

inline Eigen::Index theta_size(const std::vector<int>& arch) {
  Eigen::Index total = 0;
  for (std::size_t l = 0; l + 1 < arch.size(); ++l)
    total += static_cast<Eigen::Index>(arch[l + 1]) * arch[l] + arch[l + 1];
  return total;
}

inline void validate_params(const MlpParams& model) {
  validate_arch(model.arch);
  if (model.theta.size() != theta_size(model.arch))
    throw std::invalid_argument("mlp: theta length does not match arch");
  if (!model.theta.allFinite())
    throw std::invalid_argument("mlp: non-finite parameter");
}

namespace detail {

// Offsets of layer l's weight and bias blocks inside the flat vector.
struct ThetaLayout {
  std::vector<Eigen::Index> weight_offset;
  std::vector<Eigen::Index> bias_offset;
};

inline ThetaLayout theta_layout(const std::vector<int>& arch) {
  const std::size_t layers = arch.size() - 1;
  ThetaLayout out;
  out.weight_offset.resize(layers);
  out.bias_offset.resize(layers);
  Eigen::Index w = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    out.weight_offset[l] = w;
    w += static_cast<Eigen::Index>(arch[l + 1]) * arch[l];
  }
  for (std::size_t l = 0; l < layers; ++l) {
    out.bias_offset[l] = w;
    w += arch[l + 1];
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double activate(Activation a, double x) {
  return a == Activation::tanh ? std::tanh(x) : silu(x);
}

inline double activate_grad(Activation a, double x) {
  if (a == Activation::tanh) {
    const double th = std::tanh(x);
    return 1.0 - th * th;
  }
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

}  // namespace detail

// Seeded initializer: weights N(0, 1/fan_in), biases zero.
inline MlpParams mlp_init(std::vector<int> arch, Activation activation,
                          std::uint64_t seed) {
  validate_arch(arch);
  MlpParams model;
  model.activation = activation;
  model.theta = Vec::Zero(theta_size(arch));
  const auto layout = detail::theta_layout(arch);
  Rng rng(seed, /*stream=*/0x6d6c70'696e6974ULL);
  for (std::size_t l = 0; l + 1 < arch.size(); ++l) {
    const Eigen::Index count =
        static_cast<Eigen::Index>(arch[l + 1]) * arch[l];
    const double scale = 1.0 / std::sqrt(static_cast<double>(arch[l]));
    for (Eigen::Index k = 0; k < count; ++k)
      model.theta[layout.weight_offset[l] + k] = scale * rng.normal();
  }
  model.arch = std::move(arch);
  return model;
}

// Low-rank additive adapter: effective weight of layer l is
// W_l + scale * B_l * A_l. B starts at zero so a fresh adapter is an exact
// identity; biases stay frozen. Every linear layer is adapted.
struct LoraAdapter {
  int rank = 0;
  double scale = 1.0;
  std::vector<Mat> a;  // rank x w_in
  std::vector<Mat> b;  // w_out x rank
};

inline LoraAdapter lora_wrap(const MlpParams& model, int rank,
                             std::uint64_t seed, double scale = 1.0) {
  validate_params(model);
  if (rank < 1) throw std::invalid_argument("lora: rank < 1");
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.scale = scale;
  Rng rng(seed, /*stream=*/0x6c6f7261'77726170ULL);
  for (int l = 0; l < model.layer_count(); ++l) {
    const int in = model.arch[static_cast<std::size_t>(l)];
    const int out = model.arch[static_cast<std::size_t>(l) + 1];
    if (rank > std::min(in, out))
      throw std::invalid_argument("lora: rank exceeds layer width");
    Mat a(rank, in);
    const double init_scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        a(i, j) = init_scale * rng.normal();
    adapter.a.push_back(std::move(a));
    adapter.b.push_back(Mat::Zero(out, rank));
  }
  return adapter;
}

inline void validate_adapter(const MlpParams& model,
                             const LoraAdapter& adapter) {
  const std::size_t layers = static_cast<std::size_t>(model.layer_count());
  if (adapter.a.size() != layers || adapter.b.size() != layers)
    throw std::invalid_argument("lora: layer count mismatch");
  for (std::size_t l = 0; l < layers; ++l) {
    if (adapter.a[l].rows() != adapter.rank ||
        adapter.a[l].cols() != model.arch[l] ||
        adapter.b[l].rows() != model.arch[l + 1] ||
        adapter.b[l].cols() != adapter.rank)
      throw std::invalid_argument("lora: factor shape mismatch");
  }
}

// Folds the adapter into the base weights. Round-off only; outputs of the
// merged model match the adapted model to near machine precision.
inline MlpParams merge_lora(const MlpParams& model,
                            const LoraAdapter& adapter) {
  validate_params(model);
  validate_adapter(model, adapter);
  MlpParams merged = model;
  const auto layout = detail::theta_layout(model.arch);
  for (int l = 0; l < model.layer_count(); ++l) {
    const int in = model.arch[static_cast<std::size_t>(l)];
    const int out = model.arch[static_cast<std::size_t>(l) + 1];
    Eigen::Map<Mat> w(merged.theta.data() + layout.weight_offset[l], out, in);
    w += adapter.scale * adapter.b[static_cast<std::size_t>(l)] *
         adapter.a[static_cast<std::size_t>(l)];
  }
  return merged;
}

// Number of trainable scalars in the adapter (A blocks then B blocks).
inline Eigen::Index lora_param_count(const LoraAdapter& adapter) {
  Eigen::Index total = 0;
  for (const Mat& m : adapter.a) total += m.size();
  for (const Mat& m : adapter.b) total += m.size();
  return total;
}

inline Vec pack_lora(const LoraAdapter& adapter) {
  Vec flat(lora_param_count(adapter));
  Eigen::Index at = 0;
  for (const Mat& m : adapter.a) {
    flat.segment(at, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
    at += m.size();
  }
  for (const Mat& m : adapter.b) {
    flat.segment(at, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
    at += m.size();
  }
  return flat;
}

inline void unpack_lora(const Vec& flat, LoraAdapter& adapter) {
  if (flat.size() != lora_param_count(adapter))
    throw std::invalid_argument("lora: flat vector length mismatch");
  Eigen::Index at = 0;
  for (Mat& m : adapter.a) {
    Eigen::Map<Vec>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  }
  for (Mat& m : adapter.b) {
    Eigen::Map<Vec>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  }
}

namespace detail {

// Per-sample forward pass keeping what backward needs: post-activation
// inputs z[l] to each layer, pre-activations a[l], and the low-rank
// intermediate h[l] = A_l z[l] when an adapter is attached.
struct ForwardTrace {
  std::vector<Vec> z;
  std::vector<Vec> a;
  std::vector<Vec> h;
};

inline Vec forward_traced(const MlpParams& model, const LoraAdapter* adapter,
                          const Vec& x, double t, ForwardTrace* trace) {
  const int layers = model.layer_count();
  const auto layout = theta_layout(model.arch);
  Vec z(model.arch.front());
  z.head(x.size()) = x;
  z[z.size() - 1] = t;
  if (trace) {
    trace->z.assign(static_cast<std::size_t>(layers) + 1, Vec());
    trace->a.assign(static_cast<std::size_t>(layers), Vec());
    if (adapter) trace->h.assign(static_cast<std::size_t>(layers), Vec());
    trace->z[0] = z;
  }
  for (int l = 0; l < layers; ++l) {
    const int in = model.arch[static_cast<std::size_t>(l)];
    const int out = model.arch[static_cast<std::size_t>(l) + 1];
    Eigen::Map<const Mat> w(model.theta.data() + layout.weight_offset[l], out,
                            in);
    Eigen::Map<const Vec> b(model.theta.data() + layout.bias_offset[l], out);
    Vec pre = w * z + b;
    if (adapter) {
      Vec h = adapter->a[static_cast<std::size_t>(l)] * z;
      pre += adapter->scale * (adapter->b[static_cast<std::size_t>(l)] * h);
      if (trace) trace->h[static_cast<std::size_t>(l)] = std::move(h);
    }
    if (l + 1 < layers) {
      z.resize(out);
      for (int k = 0; k < out; ++k)
        z[k] = activate(model.activation, pre[k]);
    } else {
      z = pre;
    }
    if (trace) {
      trace->a[static_cast<std::size_t>(l)] = std::move(pre);
      trace->z[static_cast<std::size_t>(l) + 1] = z;
    }
  }
  return z;
}

}  // namespace detail

inline Vec forward(const MlpParams& model, const Vec& x, double t) {
  validate_params(model);
  if (x.size() != model.input_dim())
    throw std::invalid_argument("forward: input dimension mismatch");
  if (!x.allFinite() || !std::isfinite(t))
    throw std::invalid_argument("forward: non-finite input");
  return detail::forward_traced(model, nullptr, x, t, nullptr);
}

inline Vec forward(const MlpParams& model, const LoraAdapter& adapter,
                   const Vec& x, double t) {
  validate_params(model);
  validate_adapter(model, adapter);
  if (x.size() != model.input_dim())
    throw std::invalid_argument("forward: input dimension mismatch");
  if (!x.allFinite() || !std::isfinite(t))
    throw std::invalid_argument("forward: non-finite input");
  return detail::forward_traced(model, &adapter, x, t, nullptr);
}

// Row-by-row batched evaluation; identical arithmetic to the single-sample
// path, so results match it bit for bit.
inline Mat forward_batch(const MlpParams& model, const LoraAdapter* adapter,
                         const Mat& x, const Vec& t) {
  if (x.rows() != t.size())
    throw std::invalid_argument("forward_batch: row count mismatch");
  Mat out(x.rows(), model.output_dim());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vec xi = x.row(i);
    out.row(i) = adapter ? forward(model, *adapter, xi, t[i])
                         : forward(model, xi, t[i]);
  }
  return out;
}

// A velocity field closure over fixed parameters.
inline VelocityFn field_of(MlpParams model) {
  validate_params(model);
  return [m = std::move(model)](const Vec& x, double t) {
    return detail::forward_traced(m, nullptr, x, t, nullptr);
  };
}

inline VelocityFn field_of(MlpParams model, LoraAdapter adapter) {
  validate_params(model);
  validate_adapter(model, adapter);
  return [m = std::move(model), a = std::move(adapter)](const Vec& x,
                                                        double t) {
    return detail::forward_traced(m, &a, x, t, nullptr);
  };
}

// Scalar objective over the batch of network outputs. Receives the n x d
// output matrix, must fill dL/dv of the same shape, and returns the loss.
using OutputObjective = std::function<double(const Mat& v, Mat& dv)>;

struct GradResult {
  double loss = 0.0;
  // Gradient on the flat base parameters. With an adapter attached the base
  // is frozen and this is exactly zero everywhere.
  Vec grad_theta;
  // Packed adapter gradient (pack_lora order); empty without an adapter.
  Vec grad_lora;
};

// Evaluates the objective on the given points and backpropagates through
// every row in fixed order. Rows see identical arithmetic regardless of
// batch size, and the summation order is deterministic.
inline GradResult loss_and_grad(const MlpParams& model,
                                const LoraAdapter* adapter, const Mat& x,
                                const Vec& t, const OutputObjective& objective) {
  validate_params(model);
  if (adapter) validate_adapter(model, *adapter);
  if (x.rows() != t.size())
    throw std::invalid_argument("loss_and_grad: row count mismatch");
  const int n = static_cast<int>(x.rows());
  const int layers = model.layer_count();
  const auto layout = detail::theta_layout(model.arch);

  std::vector<detail::ForwardTrace> traces(static_cast<std::size_t>(n));
  Mat v(n, model.output_dim());
  for (int i = 0; i < n; ++i) {
    const Vec xi = x.row(i);
    v.row(i) = detail::forward_traced(model, adapter, xi, t[i],
                                      &traces[static_cast<std::size_t>(i)]);
  }

  Mat dv = Mat::Zero(n, model.output_dim());
  GradResult result;
  result.loss = objective(v, dv);
  if (!std::isfinite(result.loss))
    throw NonFiniteError("loss_and_grad: non-finite loss");

  result.grad_theta = Vec::Zero(model.theta.size());
  std::vector<Mat> grad_a, grad_b;
  if (adapter) {
    for (const Mat& m : adapter->a) grad_a.push_back(Mat::Zero(m.rows(), m.cols()));
    for (const Mat& m : adapter->b) grad_b.push_back(Mat::Zero(m.rows(), m.cols()));
  }

  for (int i = 0; i < n; ++i) {
    const auto& tr = traces[static_cast<std::size_t>(i)];
    Vec d = dv.row(i);
    for (int l = layers - 1; l >= 0; --l) {
      const int in = model.arch[static_cast<std::size_t>(l)];
      const int out = model.arch[static_cast<std::size_t>(l) + 1];
      const Vec& z = tr.z[static_cast<std::size_t>(l)];
      Eigen::Map<const Mat> w(model.theta.data() + layout.weight_offset[l],
                              out, in);
      if (adapter) {
        const Mat& al = adapter->a[static_cast<std::size_t>(l)];
        const Mat& bl = adapter->b[static_cast<std::size_t>(l)];
        const Vec bt_d = bl.transpose() * d;
        grad_a[static_cast<std::size_t>(l)].noalias() +=
            adapter->scale * bt_d * z.transpose();
        grad_b[static_cast<std::size_t>(l)].noalias() +=
            adapter->scale * d * tr.h[static_cast<std::size_t>(l)].transpose();
        if (l > 0) {
          Vec dz = w.transpose() * d;
          dz.noalias() += adapter->scale * (al.transpose() * bt_d);
          const Vec& pre = tr.a[static_cast<std::size_t>(l) - 1];
          d.resize(in);
          for (int k = 0; k < in; ++k)
            d[k] = dz[k] * detail::activate_grad(model.activation, pre[k]);
        }
      } else {
        Eigen::Map<Mat> gw(result.grad_theta.data() + layout.weight_offset[l],
                           out, in);
        gw.noalias() += d * z.transpose();
        result.grad_theta.segment(layout.bias_offset[l], out) += d;
        if (l > 0) {
          const Vec dz = w.transpose() * d;
          const Vec& pre = tr.a[static_cast<std::size_t>(l) - 1];
          d.resize(in);
          for (int k = 0; k < in; ++k)
            d[k] = dz[k] * detail::activate_grad(model.activation, pre[k]);
        }
      }
    }
  }

  if (adapter) {
    LoraAdapter grads;
    grads.rank = adapter->rank;
    grads.scale = adapter->scale;
    grads.a = std::move(grad_a);
    grads.b = std::move(grad_b);
    result.grad_lora = pack_lora(grads);
  }
  return result;
}

// Jacobian of the network output in the flat parameters, one row per output
// coordinate. Each row is a plain backward pass seeded with a unit vector.
inline Mat param_jacobian(const MlpParams& model, const Vec& x, double t) {
  validate_params(model);
  if (x.size() != model.input_dim())
    throw std::invalid_argument("param_jacobian: input dimension mismatch");
  const int layers = model.layer_count();
  const auto layout = detail::theta_layout(model.arch);
  detail::ForwardTrace tr;
  detail::forward_traced(model, nullptr, x, t, &tr);
  Mat jac = Mat::Zero(model.output_dim(), model.theta.size());
  for (int k = 0; k < model.output_dim(); ++k) {
    Vec d = Vec::Zero(model.output_dim());
    d[k] = 1.0;
    for (int l = layers - 1; l >= 0; --l) {
      const int in = model.arch[static_cast<std::size_t>(l)];
      const int out = model.arch[static_cast<std::size_t>(l) + 1];
      const Vec& z = tr.z[static_cast<std::size_t>(l)];
      Eigen::Map<const Mat> w(model.theta.data() + layout.weight_offset[l],
                              out, in);
      // Weight blocks are column-major inside the flat vector, matching the
      // flattened outer product.
      const Mat gw_block = d * z.transpose();
      jac.row(k).segment(layout.weight_offset[l], gw_block.size()) =
          Eigen::Map<const Vec>(gw_block.data(), gw_block.size());
      jac.row(k).segment(layout.bias_offset[l], out) = d;
      if (l > 0) {
        const Vec dz = w.transpose() * d;
        const Vec& pre = tr.a[static_cast<std::size_t>(l) - 1];
        d.resize(in);
        for (int kk = 0; kk < in; ++kk)
          d[kk] = dz[kk] * detail::activate_grad(model.activation, pre[kk]);
      }
    }
  }
  return jac;
}

// Adam with standard bias correction. With an all-zero gradient history a
// zero gradient leaves parameters untouched (the update is 0 / (0 + eps)).
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m;
  Vec v;
  long step = 0;
};

inline void adam_step(Vec& theta, const Vec& grad, AdamState& state,
                      const AdamConfig& cfg) {
  if (theta.size() != grad.size())
    throw std::invalid_argument("adam_step: length mismatch");
  if (state.m.size() == 0) {
    state.m = Vec::Zero(theta.size());
    state.v = Vec::Zero(theta.size());
  }
  if (state.m.size() != theta.size())
    throw std::invalid_argument("adam_step: stale optimizer state");
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v.array().matrix() +
            (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 =
      1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 =
      1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Vec m_hat = state.m / bc1;
  const Vec v_hat = state.v / bc2;
  theta -= cfg.lr *
           (m_hat.array() / (v_hat.array().sqrt() + cfg.eps)).matrix();
}

inline void sgd_adam_step(MlpParams& model, const Vec& grad, AdamState& state,
                          const AdamConfig& cfg) {
  adam_step(model.theta, grad, state, cfg);
}

}  // namespace gradflow
