#pragma once

// Minibatch couplings between a source batch and a target batch: independent
// index pairing, exact minimum-cost assignment, and entropic (Sinkhorn)
// transport with a sampled pairing.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

enum class CouplingKind { independent, ot_exact, ot_sinkhorn };

inline std::string to_string(CouplingKind kind) {
  switch (kind) {
    case CouplingKind::independent: return "independent";
    case CouplingKind::ot_exact: return "ot";
    case CouplingKind::ot_sinkhorn: return "sinkhorn";
  }
  return "?";
}

inline CouplingKind parse_coupling_kind(const std::string& name) {
  if (name == "independent") return CouplingKind::independent;
  if (name == "ot") return CouplingKind::ot_exact;
  if (name == "sinkhorn") return CouplingKind::ot_sinkhorn;
  throw std::invalid_argument("unknown coupling kind: " + name);
}

// Paired minibatch. Row i of x0 travels to row i of x1.
struct CoupledBatch {
  Mat x0;
  Mat x1;
  CouplingKind kind = CouplingKind::independent;
  double transport_cost = 0.0;  // mean over rows of |x1_i - x0_i|^2

  // Recomputes the mean squared pair cost from the stored rows. Invariant:
  // equals transport_cost up to floating round-off.
  double recompute_cost() const {
    if (x0.rows() == 0) return 0.0;
    return (x1 - x0).rowwise().squaredNorm().mean();
  }
};

// All-pairs squared Euclidean cost, c(i, j) = |x0_i - x1_j|^2.
inline Mat pairwise_squared_cost(const Mat& x0, const Mat& x1) {
  if (x0.cols() != x1.cols())
    throw std::invalid_argument("pairwise_squared_cost: dim mismatch");
  const Vec n0 = x0.rowwise().squaredNorm();
  const Vec n1 = x1.rowwise().squaredNorm();
  Mat cost = (-2.0 * x0 * x1.transpose());
  cost.colwise() += n0;
  cost.rowwise() += n1.transpose();
  // Cancellation can leave tiny negatives on (near-)identical points.
  return cost.cwiseMax(0.0);
}

namespace detail {

inline void check_equal_rows(const Mat& x0, const Mat& x1, const char* where) {
  if (x0.rows() != x1.rows())
    throw std::invalid_argument(std::string(where) + ": row count mismatch");
  if (x0.cols() != x1.cols())
    throw std::invalid_argument(std::string(where) + ": dim mismatch");
}

// Fisher-Yates permutation of {0..n-1} driven by its own derived stream.
inline std::vector<int> random_permutation(int n, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed, /*stream=*/0x706572'6d757465ULL);
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(i + 1);
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

inline Mat take_rows(const Mat& m, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

// Shortest-augmenting-path assignment (Jonker-Volgenant flavor) on a square
// cost matrix. Returns col_of_row: row i is matched to column col_of_row[i],
// minimizing the total cost. Ties resolve by scan order, so the result is
// deterministic: the first minimum encountered (lowest index) wins.
inline std::vector<int> solve_assignment(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("assignment: not square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based internally; index 0 is the virtual unmatched column.
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> row_of_col(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> prev_col(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    int j0 = 0;
    std::vector<double> min_reduced(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> visited(static_cast<std::size_t>(n) + 1, 0);
    do {
      visited[static_cast<std::size_t>(j0)] = 1;
      const int i0 = row_of_col[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (visited[static_cast<std::size_t>(j)]) continue;
        const double reduced =
            cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
            v[static_cast<std::size_t>(j)];
        if (reduced < min_reduced[static_cast<std::size_t>(j)]) {
          min_reduced[static_cast<std::size_t>(j)] = reduced;
          prev_col[static_cast<std::size_t>(j)] = j0;
        }
        if (min_reduced[static_cast<std::size_t>(j)] < delta) {
          delta = min_reduced[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (visited[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(row_of_col[static_cast<std::size_t>(j)])] +=
              delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          min_reduced[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[static_cast<std::size_t>(j0)] != 0);
    // Augment along the alternating path back to the virtual column.
    do {
      const int j1 = prev_col[static_cast<std::size_t>(j0)];
      row_of_col[static_cast<std::size_t>(j0)] =
          row_of_col[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col_of_row(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    col_of_row[static_cast<std::size_t>(row_of_col[static_cast<std::size_t>(j)]) -
               1] = j - 1;
  return col_of_row;
}

}  // namespace detail

// Product coupling: pairs row i of x0 with a seeded shuffle of x1. Because
// both batches were drawn independently, any index pairing realizes the
// product measure; shuffling decorrelates accidental ordering.
inline CoupledBatch independent_coupling(const Mat& x0, const Mat& x1,
                                         std::uint64_t seed) {
  detail::check_equal_rows(x0, x1, "independent_coupling");
  const int n = static_cast<int>(x0.rows());
  CoupledBatch out;
  out.x0 = x0;
  out.x1 = detail::take_rows(x1, detail::random_permutation(n, seed));
  out.kind = CouplingKind::independent;
  out.transport_cost = out.recompute_cost();
  return out;
}

// Exact minimum-cost pairing under squared Euclidean cost. O(n^3); refuses
// batches past 4096 rows where that becomes unreasonable on one core.
inline CoupledBatch ot_coupling_exact(const Mat& x0, const Mat& x1) {
  detail::check_equal_rows(x0, x1, "ot_coupling_exact");
  const int n = static_cast<int>(x0.rows());
  if (n > 4096)
    throw std::invalid_argument("ot_coupling_exact: batch over 4096 rows");
  CoupledBatch out;
  out.x0 = x0;
  if (n == 0) {
    out.x1 = x1;
    out.kind = CouplingKind::ot_exact;
    return out;
  }
  const std::vector<int> assignment =
      detail::solve_assignment(pairwise_squared_cost(x0, x1));
  out.x1 = detail::take_rows(x1, assignment);
  out.kind = CouplingKind::ot_exact;
  out.transport_cost = out.recompute_cost();
  return out;
}

struct SinkhornResult {
  Mat plan;               // n x m, entries sum to 1
  int iterations = 0;     // full row+column update rounds performed
  double marginal_error = 0.0;  // max |row or column sum - uniform marginal|
  bool converged = false;       // marginal_error < tol before the cap
};

// Log-domain Sinkhorn iterations for entropic OT with uniform marginals.
// Stops once both marginals match 1/n (resp. 1/m) within tol, or at the
// iteration cap, whichever comes first.
inline SinkhornResult sinkhorn_plan(const Mat& cost, double epsilon,
                                    int max_iters, double tol = 1e-8) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon <= 0");
  if (max_iters < 1) throw std::invalid_argument("sinkhorn: iters < 1");
  if (!cost.allFinite())
    throw std::invalid_argument("sinkhorn: non-finite cost matrix");
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  // log P_ij = (f_i + g_j - C_ij) / epsilon
  Vec f = Vec::Zero(n);
  Vec g = Vec::Zero(m);
  const auto logsumexp_rows = [&](const Mat& log_plan) {
    Vec out(log_plan.rows());
    for (Eigen::Index i = 0; i < log_plan.rows(); ++i) {
      const double mx = log_plan.row(i).maxCoeff();
      out[i] = mx + std::log((log_plan.row(i).array() - mx).exp().sum());
    }
    return out;
  };
  SinkhornResult result;
  Mat log_plan(n, m);
  const auto refresh_log_plan = [&] {
    log_plan = (-cost) / epsilon;
    log_plan.colwise() += f / epsilon;
    log_plan.rowwise() += (g / epsilon).transpose();
  };
  for (int it = 0; it < max_iters; ++it) {
    refresh_log_plan();
    f += epsilon * (log_a - logsumexp_rows(log_plan).array()).matrix();
    refresh_log_plan();
    g += epsilon *
         (log_b - logsumexp_rows(log_plan.transpose()).array()).matrix();
    refresh_log_plan();
    result.iterations = it + 1;
    const Mat plan = log_plan.array().exp();
    const double row_err =
        (plan.rowwise().sum().array() - std::exp(log_a)).abs().maxCoeff();
    const double col_err =
        (plan.colwise().sum().array() - std::exp(log_b)).abs().maxCoeff();
    result.marginal_error = std::max(row_err, col_err);
    if (result.marginal_error < tol) {
      result.converged = true;
      break;
    }
  }
  result.plan = log_plan.array().exp();
  return result;
}

// Entropic coupling: runs Sinkhorn, then draws one target per source row from
// the plan's conditional row distribution. Rows may share targets; the result
// is a sample from the plan, not a permutation.
inline CoupledBatch ot_coupling_sinkhorn(const Mat& x0, const Mat& x1,
                                         double epsilon, int iters,
                                         std::uint64_t seed) {
  detail::check_equal_rows(x0, x1, "ot_coupling_sinkhorn");
  const int n = static_cast<int>(x0.rows());
  CoupledBatch out;
  out.x0 = x0;
  out.kind = CouplingKind::ot_sinkhorn;
  if (n == 0) {
    out.x1 = x1;
    return out;
  }
  const SinkhornResult sk =
      sinkhorn_plan(pairwise_squared_cost(x0, x1), epsilon, iters);
  std::vector<int> pick(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const Vec row = sk.plan.row(i);
    const double total = row.sum();
    Rng rng(mix64(seed, static_cast<std::uint64_t>(i), /*b=*/2));
    const double u = rng.uniform() * total;
    double acc = 0.0;
    int j = n - 1;  // fall through to the last column on round-off
    for (int k = 0; k < n; ++k) {
      acc += row[k];
      if (u < acc) {
        j = k;
        break;
      }
    }
    pick[static_cast<std::size_t>(i)] = j;
  }
  out.x1 = detail::take_rows(x1, pick);
  out.transport_cost = out.recompute_cost();
  return out;
}

// Config-driven dispatcher used by the training loop.
inline CoupledBatch make_coupling(CouplingKind kind, const Mat& x0,
                                  const Mat& x1, std::uint64_t seed,
                                  double sinkhorn_epsilon = 0.05,
                                  int sinkhorn_iters = 200) {
  switch (kind) {
    case CouplingKind::independent: return independent_coupling(x0, x1, seed);
    case CouplingKind::ot_exact: return ot_coupling_exact(x0, x1);
    case CouplingKind::ot_sinkhorn:
      return ot_coupling_sinkhorn(x0, x1, sinkhorn_epsilon, sinkhorn_iters,
                                  seed);
  }
  throw std::invalid_argument("make_coupling: bad kind");
}

}  // namespace gradflow
