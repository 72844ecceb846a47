#pragma once

// Derivatives of the Sinkhorn rank/sort operators.
//
//  * vjp_unrolled: reverse mode through the recorded log-domain iterations.
//    This is the exact derivative of the finite-iteration map, not of the
//    fixed point.
//  * jacobian_implicit: implicit-function Jacobian of the scalings (u, v) at
//    a converged fixed point u o K v = a, v o K^T u = b.
//  * finite_diff_check: central differences, used to cross-check both.
//
// Gradients are taken with respect to the cost support z = squash(x) unless
// the raw-x chain is requested. Sorts also depend on raw x directly through
// the barycenters; that term is reported separately as `values`.

#include <softsort/core.hpp>
#include <softsort/measures.hpp>
#include <softsort/sinkhorn.hpp>

#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

namespace softsort {

/// Reverse-mode record of one log-domain forward solve.
struct Tape {
  Vector weights;         // a
  Vector x;               // raw input, averaged by the sorts
  Squash squash = Squash::logistic;
  Standardized standardized;  // empty when squash == none
  Vector support;         // z, the squashed coordinates that enter the cost
  TargetDescriptor target = TargetDescriptor::uniform_grid(1);
  CostSpec cost{};
  double epsilon = 0.0;
  Matrix cost_matrix;     // C_ij = h(y_j - z_i)
  Matrix cost_partials;   // dC_ij / dz_i = -h'(y_j - z_i)
  Vector squash_factors;  // g'(s_i); ones when squash == none
  std::vector<Vector> alphas;  // potentials after each sweep, t = 1..l
  std::vector<Vector> betas;
  SinkhornState final_state;

  int iterations() const { return static_cast<int>(alphas.size()); }
  Eigen::Index n() const { return weights.size(); }
  Eigen::Index m() const { return target.size(); }

  /// Re-run the same number of sweeps and compare every recorded potential
  /// bit for bit.
  bool replay_matches() const {
    std::size_t t = 0;
    bool same = true;
    detail::run_log(weights, target.weights(), cost_matrix, epsilon, 0.0, iterations(), false,
                    [&](const Vector& a, const Vector& b) {
                      same = same && (a.array() == alphas[t].array()).all() && (b.array() == betas[t].array()).all();
                      ++t;
                    });
    return same && t == alphas.size();
  }
};

inline Tape record_tape(const DiscreteMeasure& source, const TargetDescriptor& target, const SoftOptions& opt = {}) {
  opt.sinkhorn.validate();
  Tape tape;
  tape.weights = source.weights();
  tape.x = source.support();
  tape.squash = opt.squash;
  tape.target = target;
  tape.cost = opt.cost;
  tape.epsilon = opt.sinkhorn.epsilon;
  const Eigen::Index n = source.size(), m = target.size();

  tape.squash_factors = Vector::Ones(n);
  if (opt.squash == Squash::none) {
    tape.support = source.support();
  } else {
    tape.standardized = standardize(source.support());
    tape.support.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      tape.support[i] = squash_scalar(tape.standardized.values[i], opt.squash);
      tape.squash_factors[i] = squash_scalar_derivative(tape.standardized.values[i], opt.squash);
    }
  }
  tape.cost_matrix = build_cost(tape.support, target.support(), opt.cost).entries;
  tape.cost_partials.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      tape.cost_partials(i, j) = -opt.cost.derivative(target.support()[j] - tape.support[i]);
    }
  }
  tape.final_state = detail::run_log(tape.weights, target.weights(), tape.cost_matrix, tape.epsilon, opt.sinkhorn.eta,
                                     opt.sinkhorn.max_iters, true, [&](const Vector& a, const Vector& b) {
                                       tape.alphas.push_back(a);
                                       tape.betas.push_back(b);
                                     });
  return tape;
}

struct Gradient {
  Vector support;           // d/dz through the cost matrix
  Vector values;            // d/dx through the barycenter weights of the sorts
  Vector weights;           // d/da (unrolled path only)
  std::optional<Vector> x;  // full raw-x gradient; absent for constant input
};

namespace detail {

// Pull a gradient on z back to raw x through z = g((x - mean) / scale) and
// add the direct barycenter term.
inline std::optional<Vector> raw_chain(const Vector& grad_support, const Vector& grad_values, Squash g,
                                       const Standardized& st, const Vector& squash_factors) {
  if (g == Squash::none) return grad_support + grad_values;
  if (st.degenerate) return std::nullopt;
  const double n = static_cast<double>(grad_support.size());
  const Vector gs = grad_support.cwiseProduct(squash_factors);
  const double mean_g = gs.mean();
  const double proj = gs.dot(st.values) / n;
  Vector out = (gs.array() - mean_g - st.values.array() * proj).matrix() / st.scale;
  return out + grad_values;
}

inline void check_seeds(const Vector& seed_ranks, const Vector& seed_sorts, Eigen::Index n, Eigen::Index m) {
  require(seed_ranks.size() == 0 || seed_ranks.size() == n, "seed on ranks must have length n (or be empty)");
  require(seed_sorts.size() == 0 || seed_sorts.size() == m, "seed on sorts must have length m (or be empty)");
}

}  // namespace detail

/// Cotangent of <seed_ranks, s_rank> + <seed_sorts, s_sort> pulled back
/// through every recorded sweep. Either seed may be empty (treated as zero).
inline Gradient vjp_unrolled(const Vector& seed_ranks, const Vector& seed_sorts, const Tape& tape) {
  const Eigen::Index n = tape.n(), m = tape.m();
  detail::check_seeds(seed_ranks, seed_sorts, n, m);
  detail::require(tape.iterations() >= 1, "vjp_unrolled: empty tape");
  const Vector gr = seed_ranks.size() ? seed_ranks : Vector::Zero(n);
  const Vector gs = seed_sorts.size() ? seed_sorts : Vector::Zero(m);
  const Vector& a = tape.weights;
  const Vector& b = tape.target.weights();
  const Vector& bbar = tape.target.cumulative();
  const Matrix& c = tape.cost_matrix;
  const double eps = tape.epsilon;
  const double nn = static_cast<double>(n);

  Gradient grad;
  grad.weights = Vector::Zero(n);
  grad.values = Vector::Zero(n);
  Matrix cbar = Matrix::Zero(n, m);

  // Output layer.
  const Vector& alpha_l = tape.alphas.back();
  const Vector& beta_l = tape.betas.back();
  Vector abar = Vector::Zero(n), bbar_pot = Vector::Zero(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    double rank_i = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double p = std::exp((alpha_l[i] + beta_l[j] - c(i, j)) / eps);
      rank_i += p * bbar[j];
      const double g = gr[i] * nn * bbar[j] / a[i] + gs[j] * tape.x[i] / b[j];
      const double q = g * p / eps;
      abar[i] += q;
      bbar_pot[j] += q;
      cbar(i, j) -= q;
      grad.values[i] += gs[j] * p / b[j];
    }
    grad.weights[i] -= gr[i] * nn * rank_i / (a[i] * a[i]);
  }

  // Sweeps in reverse. Sweep t computes beta^t from alpha^{t-1}, then
  // alpha^t from beta^t; beta^{t-1} cancels out of the update.
  std::vector<double> w(static_cast<std::size_t>(std::max(n, m)));
  for (int t = tape.iterations(); t >= 1; --t) {
    const Vector& beta_t = tape.betas[t - 1];
    // alpha^t_i = eps log a_i - eps LSE_j((beta^t_j - C_ij) / eps)
    for (Eigen::Index i = 0; i < n; ++i) {
      double hi = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) {
        w[j] = (beta_t[j] - c(i, j)) / eps;
        hi = std::max(hi, w[j]);
      }
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) z += (w[j] = std::exp(w[j] - hi));
      for (Eigen::Index j = 0; j < m; ++j) {
        const double pi = w[j] / z;
        bbar_pot[j] -= abar[i] * pi;
        cbar(i, j) += abar[i] * pi;
      }
      grad.weights[i] += eps * abar[i] / a[i];
    }
    // beta^t_j = eps log b_j - eps LSE_i((alpha^{t-1}_i - C_ij) / eps)
    Vector abar_prev = Vector::Zero(n);
    if (t > 1) {
      const Vector& alpha_prev = tape.alphas[t - 2];
      for (Eigen::Index j = 0; j < m; ++j) {
        double hi = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) {
          w[i] = (alpha_prev[i] - c(i, j)) / eps;
          hi = std::max(hi, w[i]);
        }
        double z = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) z += (w[i] = std::exp(w[i] - hi));
        for (Eigen::Index i = 0; i < n; ++i) {
          const double pi = w[i] / z;
          abar_prev[i] -= bbar_pot[j] * pi;
          cbar(i, j) += bbar_pot[j] * pi;
        }
      }
    } else {
      // alpha^0 = 0, so only the cost receives the cotangent.
      for (Eigen::Index j = 0; j < m; ++j) {
        double hi = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) {
          w[i] = -c(i, j) / eps;
          hi = std::max(hi, w[i]);
        }
        double z = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) z += (w[i] = std::exp(w[i] - hi));
        for (Eigen::Index i = 0; i < n; ++i) cbar(i, j) += bbar_pot[j] * w[i] / z;
      }
    }
    abar = abar_prev;
    bbar_pot.setZero();
  }

  grad.support = cbar.cwiseProduct(tape.cost_partials).rowwise().sum();
  grad.x = detail::raw_chain(grad.support, grad.values, tape.squash, tape.standardized, tape.squash_factors);
  return grad;
}

/// Forward map of exactly `iterations` log-domain sweeps on raw arrays
/// (weights need not sum to one). Used to finite-difference the unrolled
/// derivative.
inline SoftResult unrolled_forward(const Vector& a, const Vector& x, const TargetDescriptor& target,
                                   const SoftOptions& opt, int iterations) {
  const Vector z = squash(x, opt.squash);
  const Matrix c = build_cost(z, target.support(), opt.cost).entries;
  const SinkhornState st = sinkhorn_log_iterations(a, target.weights(), c, opt.sinkhorn.epsilon, iterations);
  return detail::read_operators(st, a, x, target);
}

struct FiniteDifference {
  Vector gradient;
  double step = 0.0;
};

/// Central differences, one coordinate at a time.
inline FiniteDifference finite_diff_check(const std::function<double(const Vector&)>& fn, const Vector& x,
                                          double step) {
  detail::require(step > 0.0, "finite_diff_check: step must be > 0");
  FiniteDifference fd{Vector(x.size()), step};
  Vector probe = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + step;
    const double up = fn(probe);
    probe[k] = x[k] - step;
    const double down = fn(probe);
    probe[k] = x[k];
    fd.gradient[k] = (up - down) / (2.0 * step);
  }
  return fd;
}

/// Pieces of the implicit-function Jacobian at a converged Sinkhorn state.
///
/// With w = [u; v], the fixed point f(z, w) = w o Lambda w - [a; b] = 0 has
///   J_w f = [[D(Kv), D(u)K], [D(v)K^T, D(K^T u)]]
///   J_z f = [[D(u o Delta v)], [D(v) Delta^T D(u)]]
/// where Delta_ij = dK_ij / dz_i. At small epsilon u and v span hundreds of
/// orders of magnitude, so the solve is done in log-scalings g = d log w / dz:
/// J_w f D(w) = D([a; b]) + [[0, P], [P^T, 0]] =: G, symmetric with entries
/// on the scale of the plan, and the right-hand side D(w)^{-1}-free as well
/// (u_i Delta_ij v_j = P_ij h'_ij / eps). G is singular along [1; -1] (the
/// scaling gauge u -> s u, v -> v / s); the solve returns the solution
/// orthogonal to it. Outputs built from the plan do not depend on the gauge.
struct ImplicitJacobian {
  Matrix plan;          // P = D(u) K D(v)
  Matrix log_kernel_partials;  // d log K_ij / dz_i = h'(y_j - z_i) / eps
  Matrix log_jacobian;  // d log w / dz, (n+m) x n
  double rcond = 0.0;

  // The same objects in the scaling variables. Only meaningful while
  // exp(alpha / eps) and exp(beta / eps) are representable.
  Matrix system;    // J_w f, (n+m) x (n+m)
  Matrix rhs;       // J_z f, (n+m) x n
  Matrix kernel;    // K
  Matrix delta;     // Delta
  Vector u, v;
  Matrix jacobian;  // J_z w = D(w) log_jacobian
  bool scalings_finite = false;
};

namespace detail {

// Solve A h = g for every column of g subject to <null, h> = 0, bordering A
// with its left null vector so the system is square and regular.
inline Matrix gauge_fixed_solve(const Matrix& a, const Vector& left_null, const Vector& null, const Matrix& g,
                                double& rcond) {
  const Eigen::Index k = a.rows();
  Matrix bordered = Matrix::Zero(k + 1, k + 1);
  bordered.topLeftCorner(k, k) = a;
  bordered.topRightCorner(k, 1) = left_null.normalized();
  bordered.bottomLeftCorner(1, k) = null.normalized().transpose();
  Matrix rhs = Matrix::Zero(k + 1, g.cols());
  rhs.topRows(k) = g;
  const Eigen::PartialPivLU<Matrix> lu(bordered);
  rcond = lu.rcond();
  if (!(rcond > 1e-15)) {
    throw NumericalError("jacobian_implicit: linear system is singular to working precision (condition ~ " +
                         std::to_string(1.0 / rcond) + ")");
  }
  return lu.solve(rhs).topRows(k);
}

inline Vector gauge_vector(Eigen::Index n, Eigen::Index m) {
  Vector e(n + m);
  e << Vector::Ones(n), -Vector::Ones(m);
  return e;
}

}  // namespace detail

/// Requires a converged state; `support` is z (the cost's row support) and
/// `target_support` is y.
inline ImplicitJacobian jacobian_implicit(const SinkhornState& state, const Vector& support,
                                          const Vector& target_support, const CostSpec& h) {
  detail::require(state.converged, "jacobian_implicit: requires a converged Sinkhorn state");
  const Eigen::Index n = state.cost.rows(), m = state.cost.cols();
  detail::require(support.size() == n && target_support.size() == m, "jacobian_implicit: support size mismatch");
  const double eps = state.epsilon;

  ImplicitJacobian J;
  J.plan = state.plan();
  J.log_kernel_partials.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      // -c'_x / eps with c(x, y) = h(y - x)
      J.log_kernel_partials(i, j) = h.derivative(target_support[j] - support[i]) / eps;
    }
  }

  const Vector row_mass = J.plan.rowwise().sum();
  const Vector col_mass = J.plan.colwise().sum().transpose();
  Matrix g_sys = Matrix::Zero(n + m, n + m);
  g_sys.topLeftCorner(n, n) = row_mass.asDiagonal();
  g_sys.topRightCorner(n, m) = J.plan;
  g_sys.bottomLeftCorner(m, n) = J.plan.transpose();
  g_sys.bottomRightCorner(m, m) = col_mass.asDiagonal();
  const Matrix weighted = J.plan.cwiseProduct(J.log_kernel_partials);
  Matrix g_rhs = Matrix::Zero(n + m, n);
  g_rhs.topRows(n) = weighted.rowwise().sum().asDiagonal();
  g_rhs.bottomRows(m) = weighted.transpose();
  const Vector e = detail::gauge_vector(n, m);
  J.log_jacobian = -detail::gauge_fixed_solve(g_sys, e, e, g_rhs, J.rcond);

  std::tie(J.u, J.v) = state.scalings();
  J.scalings_finite = J.u.allFinite() && J.v.allFinite();
  J.kernel = (-state.cost.array() / eps).exp().matrix();
  J.delta = J.log_kernel_partials.cwiseProduct(J.kernel);
  const Vector kv = J.kernel * J.v;
  const Vector ktu = J.kernel.transpose() * J.u;
  J.system = Matrix::Zero(n + m, n + m);
  J.system.topLeftCorner(n, n) = kv.asDiagonal();
  J.system.topRightCorner(n, m) = J.u.asDiagonal() * J.kernel;
  J.system.bottomLeftCorner(m, n) = J.v.asDiagonal() * J.kernel.transpose();
  J.system.bottomRightCorner(m, m) = ktu.asDiagonal();
  J.rhs = Matrix::Zero(n + m, n);
  J.rhs.topRows(n) = J.u.cwiseProduct(J.delta * J.v).asDiagonal();
  J.rhs.bottomRows(m) = J.v.asDiagonal() * J.delta.transpose() * J.u.asDiagonal();
  Vector w(n + m);
  w << J.u, J.v;
  J.jacobian = w.asDiagonal() * J.log_jacobian;
  return J;
}

/// Same Jacobian J_z w through the factored inverse
///   (D(Lambda w / w) + Lambda)^{-1} D(w^{-1}),
/// whose inner matrix is symmetric, solved directly in the scaling variables.
inline Matrix jacobian_implicit_factored(const ImplicitJacobian& J) {
  if (!J.scalings_finite) throw NumericalError("jacobian_implicit_factored: scalings overflow at this epsilon");
  const Eigen::Index n = J.u.size(), m = J.v.size();
  Vector w(n + m);
  w << J.u, J.v;
  Matrix lambda = Matrix::Zero(n + m, n + m);
  lambda.topRightCorner(n, m) = J.kernel;
  lambda.bottomLeftCorner(m, n) = J.kernel.transpose();
  const Vector lw = lambda * w;
  const Matrix inner = Matrix(lw.cwiseQuotient(w).asDiagonal()) + lambda;
  const Matrix scaled_rhs = w.cwiseInverse().asDiagonal() * J.rhs;
  // inner [u; -v] = 0; the gauge <[1; -1], D(w)^{-1} h> = 0 matches the merged solve.
  Vector null(n + m), gauge(n + m);
  null << J.u, -J.v;
  gauge << J.u.cwiseInverse(), -J.v.cwiseInverse();
  double rcond = 0.0;
  return -detail::gauge_fixed_solve(inner, null, gauge, scaled_rhs, rcond);
}

/// Jacobians of the rank (n x n) and sort (m x n) outputs with respect to z,
/// from dP_ij / dz_k = P_ij (g_u(i,k) + g_v(j,k) + [i == k] d log K_ij / dz_i).
/// The sorts' direct dependence on raw x is not included.
struct OutputJacobians {
  Matrix ranks;
  Matrix sorts;
};

inline OutputJacobians implicit_output_jacobians(const ImplicitJacobian& J, const Vector& weights,
                                                 const TargetDescriptor& target, const Vector& x) {
  const Eigen::Index n = J.plan.rows(), m = J.plan.cols();
  const Vector& b = target.weights();
  const Vector& bbar = target.cumulative();
  const double nn = static_cast<double>(n);
  const Matrix gu = J.log_jacobian.topRows(n);
  const Matrix gv = J.log_jacobian.bottomRows(m);
  const Matrix& p = J.plan;
  const Matrix pk = p.cwiseProduct(J.log_kernel_partials);

  OutputJacobians out{Matrix(n, n), Matrix(m, n)};
  // r_i = n / a_i sum_j P_ij bbar_j
  const Vector p_bbar = p * bbar;
  out.ranks = gu.array().colwise() * p_bbar.array();
  out.ranks += p * bbar.asDiagonal() * gv;
  out.ranks.diagonal() += pk * bbar;
  out.ranks = (nn * weights.cwiseInverse()).asDiagonal() * out.ranks;
  // s_j = 1 / b_j sum_i P_ij x_i
  const Vector pt_x = p.transpose() * x;
  out.sorts = gv.array().colwise() * pt_x.array();
  out.sorts += p.transpose() * x.asDiagonal() * gu;
  out.sorts += pk.transpose() * x.asDiagonal();
  out.sorts = b.cwiseInverse().asDiagonal() * out.sorts;
  return out;
}

/// Vector-Jacobian product through the implicit path for a recorded forward
/// solve. Gradient with respect to a is not available on this path.
inline Gradient vjp_implicit(const Vector& seed_ranks, const Vector& seed_sorts, const Tape& tape) {
  const Eigen::Index n = tape.n(), m = tape.m();
  detail::check_seeds(seed_ranks, seed_sorts, n, m);
  const ImplicitJacobian J = jacobian_implicit(tape.final_state, tape.support, tape.target.support(), tape.cost);
  const OutputJacobians oj = implicit_output_jacobians(J, tape.weights, tape.target, tape.x);
  Gradient grad;
  grad.support = Vector::Zero(n);
  grad.values = Vector::Zero(n);
  if (seed_ranks.size()) grad.support += oj.ranks.transpose() * seed_ranks;
  if (seed_sorts.size()) {
    grad.support += oj.sorts.transpose() * seed_sorts;
    const Matrix p = tape.final_state.plan();
    grad.values = p * seed_sorts.cwiseQuotient(tape.target.weights());
  }
  grad.x = detail::raw_chain(grad.support, grad.values, tape.squash, tape.standardized, tape.squash_factors);
  return grad;
}

}  // namespace softsort
