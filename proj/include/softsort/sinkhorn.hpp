#pragma once

// Entropy-regularized optimal transport between a source measure and a fixed
// increasing target, solved by Sinkhorn scaling (multiplicative or
// log-domain), and the smoothed rank/sort operators read off the regularized
// plan.

#include <softsort/core.hpp>
#include <softsort/measures.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace softsort {

enum class SinkhornMode { multiplicative, log_domain };

struct SinkhornConfig {
  double epsilon = 1e-2;  // regularization strength
  double eta = 1e-3;      // tolerance on the L1 column-marginal residual
  int max_iters = 5000;
  SinkhornMode mode = SinkhornMode::log_domain;

  void validate() const {
    detail::require(std::isfinite(epsilon) && epsilon > 0.0, "SinkhornConfig: epsilon must be > 0");
    detail::require(std::isfinite(eta) && eta > 0.0, "SinkhornConfig: eta must be > 0");
    detail::require(max_iters >= 1, "SinkhornConfig: max_iters must be >= 1");
  }
};

/// Result of a Sinkhorn solve. Multiplicative solves fill `u`, `v` and
/// `kernel`; log-domain solves fill `alpha` and `beta`. `cost` is kept in both
/// cases so the plan can always be rebuilt.
struct SinkhornState {
  SinkhornMode mode = SinkhornMode::log_domain;
  double epsilon = 0.0;
  Matrix cost;
  Vector u, v;
  Matrix kernel;
  Vector alpha, beta;
  int iterations_used = 0;
  bool converged = false;
  double residual = std::numeric_limits<double>::infinity();

  Matrix plan() const {
    if (mode == SinkhornMode::multiplicative) return u.asDiagonal() * kernel * v.asDiagonal();
    Matrix p(cost.rows(), cost.cols());
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      for (Eigen::Index i = 0; i < cost.rows(); ++i) p(i, j) = std::exp((alpha[i] + beta[j] - cost(i, j)) / epsilon);
    }
    return p;
  }

  /// (u, v) for either mode; log-domain potentials map through e^{alpha/eps}.
  std::pair<Vector, Vector> scalings() const {
    if (mode == SinkhornMode::multiplicative) return {u, v};
    return {(alpha / epsilon).array().exp().matrix(), (beta / epsilon).array().exp().matrix()};
  }

  /// (alpha, beta) for either mode.
  std::pair<Vector, Vector> potentials() const {
    if (mode == SinkhornMode::log_domain) return {alpha, beta};
    return {epsilon * u.array().log().matrix(), epsilon * v.array().log().matrix()};
  }
};

/// Row-wise soft minimum, -eps log sum_j exp(-M_ij / eps), with the row
/// minimum factored out before exponentiating.
inline Vector soft_min_rows(const Matrix& m, double epsilon) {
  detail::require(std::isfinite(epsilon) && epsilon > 0.0, "soft_min_rows: epsilon must be > 0");
  detail::require_finite(m, "soft_min_rows input");
  detail::require(m.cols() >= 1, "soft_min_rows: matrix must have at least one column");
  Vector out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double lo = m.row(i).minCoeff();
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) acc += std::exp(-(m(i, j) - lo) / epsilon);
    out[i] = lo - epsilon * std::log(acc);
  }
  return out;
}

namespace detail {

using MatrixRef = Eigen::Ref<const Matrix>;

// beta_j <- eps log b_j + min_eps_i(C_ij - alpha_i - beta_j) + beta_j, then
// alpha_i <- eps log a_i + min_eps_j(C_ij - alpha_i - beta_j) + alpha_i.
inline void log_sweep(const MatrixRef& c, const Vector& eps_log_a, const Vector& eps_log_b, double eps, Vector& alpha,
                      Vector& beta, std::vector<double>& scratch) {
  const Eigen::Index n = c.rows(), m = c.cols();
  scratch.resize(static_cast<std::size_t>(std::max(n, m)));
  for (Eigen::Index j = 0; j < m; ++j) {
    double lo = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      scratch[i] = c(i, j) - alpha[i] - beta[j];
      lo = std::min(lo, scratch[i]);
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += std::exp(-(scratch[i] - lo) / eps);
    beta[j] = eps_log_b[j] + (lo - eps * std::log(acc)) + beta[j];
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    double lo = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      scratch[j] = c(i, j) - alpha[i] - beta[j];
      lo = std::min(lo, scratch[j]);
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) acc += std::exp(-(scratch[j] - lo) / eps);
    alpha[i] = eps_log_a[i] + (lo - eps * std::log(acc)) + alpha[i];
  }
}

inline double log_column_residual(const MatrixRef& c, const Vector& b, double eps, const Vector& alpha,
                                  const Vector& beta) {
  double total = 0.0;
  for (Eigen::Index j = 0; j < c.cols(); ++j) {
    double col = 0.0;
    for (Eigen::Index i = 0; i < c.rows(); ++i) col += std::exp((alpha[i] + beta[j] - c(i, j)) / eps);
    total += std::abs(col - b[j]);
  }
  return total;
}

inline void check_problem(const Vector& a, const Vector& b, const MatrixRef& c) {
  require(a.size() == c.rows() && b.size() == c.cols(), "sinkhorn: marginal sizes do not match the cost matrix");
  require(a.size() >= 1 && b.size() >= 1, "sinkhorn: empty problem");
  require((a.array() > 0.0).all() && (b.array() > 0.0).all(), "sinkhorn: marginals must be strictly positive");
  if (!c.allFinite()) throw std::invalid_argument("sinkhorn: cost matrix contains non-finite entries");
}

struct NoObserver {
  void operator()(const Vector&, const Vector&) const {}
};

// Log-domain iterations from zero potentials. The observer sees (alpha, beta)
// after every sweep. With `check` false exactly `max_iters` sweeps run.
template <class Observer = NoObserver>
SinkhornState run_log(const Vector& a, const Vector& b, const MatrixRef& c, double eps, double eta, int max_iters,
                      bool check, Observer&& observe = {}) {
  check_problem(a, b, c);
  SinkhornState st;
  st.mode = SinkhornMode::log_domain;
  st.epsilon = eps;
  st.cost = c;
  st.alpha = Vector::Zero(a.size());
  st.beta = Vector::Zero(b.size());
  const Vector eps_log_a = eps * a.array().log().matrix();
  const Vector eps_log_b = eps * b.array().log().matrix();
  std::vector<double> scratch;
  for (int it = 1; it <= max_iters; ++it) {
    log_sweep(c, eps_log_a, eps_log_b, eps, st.alpha, st.beta, scratch);
    observe(st.alpha, st.beta);
    st.iterations_used = it;
    if (check) {
      st.residual = log_column_residual(c, b, eps, st.alpha, st.beta);
      if (st.residual < eta) {
        st.converged = true;
        break;
      }
    }
  }
  if (!check) st.residual = log_column_residual(c, b, eps, st.alpha, st.beta);
  return st;
}

inline Matrix gibbs_kernel(const MatrixRef& c, double eps) {
  Matrix k = (-c.array() / eps).exp().matrix();
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    if (k.row(i).maxCoeff() < 1e-300) {
      throw NumericalError("sinkhorn: kernel row " + std::to_string(i) +
                           " underflows; use log-domain mode or a larger epsilon");
    }
  }
  for (Eigen::Index j = 0; j < k.cols(); ++j) {
    if (k.col(j).maxCoeff() < 1e-300) {
      throw NumericalError("sinkhorn: kernel column " + std::to_string(j) +
                           " underflows; use log-domain mode or a larger epsilon");
    }
  }
  return k;
}

inline SinkhornState run_multiplicative(const Vector& a, const Vector& b, const MatrixRef& c, Matrix kernel, double eps,
                                        double eta, int max_iters) {
  SinkhornState st;
  st.mode = SinkhornMode::multiplicative;
  st.epsilon = eps;
  st.cost = c;
  st.kernel = std::move(kernel);
  st.u = Vector::Ones(a.size());
  st.v = Vector::Ones(b.size());
  for (int it = 1; it <= max_iters; ++it) {
    st.v = b.cwiseQuotient(st.kernel.transpose() * st.u);
    st.u = a.cwiseQuotient(st.kernel * st.v);
    st.iterations_used = it;
    if (!st.u.allFinite() || !st.v.allFinite()) {
      throw NumericalError("sinkhorn: scalings overflowed after " + std::to_string(it) +
                           " iterations; use log-domain mode");
    }
    st.residual = (st.v.cwiseProduct(st.kernel.transpose() * st.u) - b).lpNorm<1>();
    if (st.residual < eta) {
      st.converged = true;
      break;
    }
  }
  return st;
}

}  // namespace detail

/// Alternating v <- b / K^T u, u <- a / K v from u = 1 until the L1 column
/// residual drops below eta. Throws NumericalError when the kernel has a row
/// or column entirely below 1e-300.
inline SinkhornState sinkhorn_multiplicative(const Vector& a, const Vector& b, const Matrix& cost,
                                             const SinkhornConfig& cfg) {
  cfg.validate();
  detail::check_problem(a, b, cost);
  return detail::run_multiplicative(a, b, cost, detail::gibbs_kernel(cost, cfg.epsilon), cfg.epsilon, cfg.eta,
                                    cfg.max_iters);
}

/// Stabilized log-domain iterations on the dual potentials, starting from
/// zero. Exhausting max_iters returns a state with converged == false.
inline SinkhornState sinkhorn_log(const Vector& a, const Vector& b, const Matrix& cost, const SinkhornConfig& cfg) {
  cfg.validate();
  return detail::run_log(a, b, cost, cfg.epsilon, cfg.eta, cfg.max_iters, true);
}

/// Exactly `iterations` log-domain sweeps, no convergence test.
inline SinkhornState sinkhorn_log_iterations(const Vector& a, const Vector& b, const Matrix& cost, double epsilon,
                                             int iterations) {
  detail::require(epsilon > 0.0 && iterations >= 1, "sinkhorn_log_iterations: bad arguments");
  return detail::run_log(a, b, cost, epsilon, 0.0, iterations, false);
}

inline SinkhornState sinkhorn(const Vector& a, const Vector& b, const Matrix& cost, const SinkhornConfig& cfg) {
  return cfg.mode == SinkhornMode::multiplicative ? sinkhorn_multiplicative(a, b, cost, cfg)
                                                  : sinkhorn_log(a, b, cost, cfg);
}

/// Smoothed ranks (length n, in [0, n]) and sorts (length m) for one input.
struct SoftResult {
  Vector s_ranks;
  Vector s_sorts;
  double epsilon_used = 0.0;
  int iterations_used = 0;
  bool converged = false;
  double residual = 0.0;
};

/// Everything an operator needs besides the data itself.
struct SoftOptions {
  CostSpec cost{};
  SinkhornConfig sinkhorn{};
  Squash squash = Squash::logistic;
};

namespace detail {

inline SoftResult read_operators(const SinkhornState& st, const Vector& a, const Vector& x_raw,
                                 const TargetDescriptor& target) {
  const Matrix p = st.plan();
  const double n = static_cast<double>(a.size());
  SoftResult r;
  r.s_ranks = n * (p * target.cumulative()).cwiseQuotient(a);
  r.s_sorts = (p.transpose() * x_raw).cwiseQuotient(target.weights());
  r.epsilon_used = st.epsilon;
  r.iterations_used = st.iterations_used;
  r.converged = st.converged;
  r.residual = st.residual;
  return r;
}

}  // namespace detail

/// Squash x, build C against the target, run Sinkhorn and return both
///   ranks n a^{-1} o u o K (v o b_cumulative) and
///   sorts b^{-1} o v o K^T (u o x).
/// The sorts average the raw x values; only the cost sees squashed ones.
inline SoftResult sinkhorn_rank_sort(const DiscreteMeasure& source, const TargetDescriptor& target,
                                     const SoftOptions& opt = {}) {
  const Vector z = squash(source.support(), opt.squash);
  const CostMatrix c = build_cost(z, target.support(), opt.cost);
  const SinkhornState st = sinkhorn(source.weights(), target.weights(), c.entries, opt.sinkhorn);
  return detail::read_operators(st, source.weights(), source.support(), target);
}

inline Vector s_rank(const DiscreteMeasure& source, const TargetDescriptor& target, const SoftOptions& opt = {}) {
  return sinkhorn_rank_sort(source, target, opt).s_ranks;
}

inline Vector s_sort(const DiscreteMeasure& source, const TargetDescriptor& target, const SoftOptions& opt = {}) {
  return sinkhorn_rank_sort(source, target, opt).s_sorts;
}

/// Several sources against one shared target. Costs (log-domain) or kernels
/// (multiplicative) live in one contiguous S x n x m tensor; instances step
/// in lockstep sweeps and each one freezes as soon as its own residual passes,
/// so row s equals the unbatched call on instance s bit for bit.
struct BatchResult {
  Matrix s_ranks;  // S x n
  Matrix s_sorts;  // S x m
  std::vector<int> iterations_used;
  std::vector<bool> converged;
};

inline BatchResult sinkhorn_rank_sort_batched(std::span<const DiscreteMeasure> batch, const TargetDescriptor& target,
                                              const SoftOptions& opt = {}) {
  detail::require(!batch.empty(), "batched: batch must be nonempty");
  opt.sinkhorn.validate();
  const Eigen::Index n = batch.front().size();
  const Eigen::Index m = target.size();
  for (const auto& s : batch) detail::require(s.size() == n, "batched: all inputs must have the same length");
  const auto count = static_cast<Eigen::Index>(batch.size());
  const double eps = opt.sinkhorn.epsilon;

  using Map = Eigen::Map<Matrix>;
  std::vector<double> tensor(static_cast<std::size_t>(count * n * m));
  auto slice = [&](Eigen::Index s) { return Map(tensor.data() + s * n * m, n, m); };
  for (Eigen::Index s = 0; s < count; ++s) {
    const Vector z = squash(batch[s].support(), opt.squash);
    slice(s) = build_cost(z, target.support(), opt.cost).entries;
  }

  std::vector<SinkhornState> states(batch.size());
  if (opt.sinkhorn.mode == SinkhornMode::multiplicative) {
    // Kernels replace the costs in the tensor; the state keeps its own copy.
    for (Eigen::Index s = 0; s < count; ++s) {
      const Matrix c = slice(s);
      detail::check_problem(batch[s].weights(), target.weights(), c);
      slice(s) = detail::gibbs_kernel(c, eps);
      states[s] = detail::run_multiplicative(batch[s].weights(), target.weights(), c, slice(s), eps, opt.sinkhorn.eta,
                                             opt.sinkhorn.max_iters);
    }
  } else {
    std::vector<Vector> eps_log_a(batch.size());
    const Vector eps_log_b = eps * target.weights().array().log().matrix();
    std::vector<bool> active(batch.size(), true);
    for (Eigen::Index s = 0; s < count; ++s) {
      detail::check_problem(batch[s].weights(), target.weights(), slice(s));
      eps_log_a[s] = eps * batch[s].weights().array().log().matrix();
      auto& st = states[s];
      st.mode = SinkhornMode::log_domain;
      st.epsilon = eps;
      st.cost = slice(s);
      st.alpha = Vector::Zero(n);
      st.beta = Vector::Zero(m);
    }
    std::vector<double> scratch;
    for (int it = 1; it <= opt.sinkhorn.max_iters; ++it) {
      bool any = false;
      for (Eigen::Index s = 0; s < count; ++s) {
        if (!active[s]) continue;
        auto& st = states[s];
        detail::log_sweep(slice(s), eps_log_a[s], eps_log_b, eps, st.alpha, st.beta, scratch);
        st.iterations_used = it;
        st.residual = detail::log_column_residual(slice(s), target.weights(), eps, st.alpha, st.beta);
        if (st.residual < opt.sinkhorn.eta) {
          st.converged = true;
          active[s] = false;
        }
        any = any || active[s];
      }
      if (!any) break;
    }
  }

  BatchResult out{Matrix(count, n), Matrix(count, m), {}, {}};
  for (Eigen::Index s = 0; s < count; ++s) {
    const SoftResult r = detail::read_operators(states[s], batch[s].weights(), batch[s].support(), target);
    out.s_ranks.row(s) = r.s_ranks.transpose();
    out.s_sorts.row(s) = r.s_sorts.transpose();
    out.iterations_used.push_back(r.iterations_used);
    out.converged.push_back(r.converged);
  }
  return out;
}

inline Matrix s_rank_batched(std::span<const DiscreteMeasure> batch, const TargetDescriptor& target,
                             const SoftOptions& opt = {}) {
  return sinkhorn_rank_sort_batched(batch, target, opt).s_ranks;
}

inline Matrix s_sort_batched(std::span<const DiscreteMeasure> batch, const TargetDescriptor& target,
                             const SoftOptions& opt = {}) {
  return sinkhorn_rank_sort_batched(batch, target, opt).s_sorts;
}

}  // namespace softsort
