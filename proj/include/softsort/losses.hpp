#pragma once

// Losses built on the Sinkhorn operators: a soft top-k classification loss
// and a soft tau-quantile used for least-quantile regression.

#include <softsort/core.hpp>
#include <softsort/differentiation.hpp>
#include <softsort/exact1d.hpp>
#include <softsort/measures.hpp>
#include <softsort/sinkhorn.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace softsort {

struct TopKLossSpec {
  int num_labels = 2;
  int k = 1;
  double epsilon = 1e-3;
  double eta = 1e-3;
  int max_iters = 5000;
  CostSpec cost{};
  Squash squash = Squash::logistic;

  void validate() const {
    detail::require(num_labels >= 1, "TopKLossSpec: num_labels must be >= 1");
    detail::require(k >= 1 && k <= num_labels, "TopKLossSpec: k must lie in [1, L]");
  }

  SoftOptions options() const { return {cost, {epsilon, eta, max_iters, SinkhornMode::log_domain}, squash}; }
};

namespace detail {

inline void check_label(const Vector& scores, int label, const TopKLossSpec& spec) {
  spec.validate();
  require(scores.size() == spec.num_labels, "soft_topk_loss: scores must have num_labels entries");
  require(label >= 1 && label <= spec.num_labels, "soft_topk_loss: label out of range");
}

inline double relu_topk(double rank, const TopKLossSpec& spec) {
  return std::max(0.0, static_cast<double>(spec.num_labels) - rank - spec.k + 1.0);
}

}  // namespace detail

/// max(0, L - rank_label - k + 1) with the rank taken from the Sinkhorn rank
/// operator (uniform weights, L regular-grid targets). `label` is 1-based.
inline double soft_topk_loss(const Vector& scores, int label, const TopKLossSpec& spec) {
  detail::check_label(scores, label, spec);
  const auto l = static_cast<Eigen::Index>(spec.num_labels);
  const Vector ranks = s_rank(DiscreteMeasure::uniform(scores), TargetDescriptor::uniform_grid(l), spec.options());
  return detail::relu_topk(ranks[label - 1], spec);
}

struct LossWithGradient {
  double value = 0.0;
  Vector gradient;  // with respect to the raw inputs
};

/// Loss and its gradient with respect to the scores (unrolled path). The
/// gradient is zero where the ReLU is flat; constant score vectors have no
/// raw-coordinate gradient and report zeros.
inline LossWithGradient soft_topk_loss_with_gradient(const Vector& scores, int label, const TopKLossSpec& spec) {
  detail::check_label(scores, label, spec);
  const auto l = static_cast<Eigen::Index>(spec.num_labels);
  const Tape tape = record_tape(DiscreteMeasure::uniform(scores), TargetDescriptor::uniform_grid(l), spec.options());
  const SoftResult r = detail::read_operators(tape.final_state, tape.weights, tape.x, tape.target);
  LossWithGradient out{detail::relu_topk(r.s_ranks[label - 1], spec), Vector::Zero(l)};
  if (out.value > 0.0) {
    Vector seed = Vector::Zero(l);
    seed[label - 1] = -1.0;
    const Gradient g = vjp_unrolled(seed, Vector(), tape);
    if (g.x) out.gradient = *g.x;
  }
  return out;
}

struct QuantileSpec {
  double tau = 0.5;
  double t = 0.1;  // filler weight
  double epsilon = 1e-2;
  double eta = 1e-3;
  int max_iters = 5000;
  CostSpec cost{};
  Squash squash = Squash::logistic;

  /// Filler t = 1 / batch_size.
  static QuantileSpec for_batch(double tau, Eigen::Index batch_size, double epsilon = 1e-2) {
    detail::require(batch_size >= 1, "QuantileSpec: batch size must be >= 1");
    QuantileSpec s;
    s.tau = tau;
    s.t = 1.0 / static_cast<double>(batch_size);
    s.epsilon = epsilon;
    return s;
  }

  void validate() const {
    detail::require(tau > 0.0 && tau < 1.0, "QuantileSpec: tau must lie in (0,1)");
    detail::require(t > 0.0 && t < std::min(2.0 * tau, 2.0 * (1.0 - tau)),
                    "QuantileSpec: filler t must lie in (0, min(2 tau, 2 (1 - tau)))");
  }

  /// b = (tau - t/2, t, 1 - tau - t/2) on y = (0, 1/2, 1).
  TargetDescriptor target() const {
    validate();
    Vector b(3), y(3);
    b << tau - t / 2.0, t, 1.0 - tau - t / 2.0;
    y << 0.0, 0.5, 1.0;
    return TargetDescriptor(b, y);
  }

  SoftOptions options() const { return {cost, {epsilon, eta, max_iters, SinkhornMode::log_domain}, squash}; }
};

/// Middle entry of the Sinkhorn sort against the three-point target, in the
/// units of x.
inline double soft_quantile(const Vector& x, const QuantileSpec& spec) {
  detail::require(x.size() >= 2, "soft_quantile: need at least two values");
  return s_sort(DiscreteMeasure::uniform(x), spec.target(), spec.options())[1];
}

inline LossWithGradient soft_quantile_with_gradient(const Vector& x, const QuantileSpec& spec) {
  detail::require(x.size() >= 2, "soft_quantile: need at least two values");
  const Tape tape = record_tape(DiscreteMeasure::uniform(x), spec.target(), spec.options());
  const SoftResult r = detail::read_operators(tape.final_state, tape.weights, tape.x, tape.target);
  const Vector seed = Vector::Unit(3, 1);
  const Gradient g = vjp_unrolled(Vector(), seed, tape);
  // Constant input: only the barycenter weights move the value.
  return {r.s_sorts[1], g.x ? *g.x : g.values};
}

/// Lower empirical quantile: the ceil(tau n)-th smallest value.
inline double hard_quantile(const Vector& x, double tau) {
  detail::require(x.size() >= 1, "hard_quantile: x must be nonempty");
  detail::require(tau > 0.0 && tau <= 1.0, "hard_quantile: tau must lie in (0,1]");
  const Vector sorted = hard_sort(x).sorted;
  const auto n = static_cast<double>(x.size());
  const auto k = static_cast<Eigen::Index>(std::ceil(tau * n - 1e-12));
  return sorted[std::clamp<Eigen::Index>(k, 1, x.size()) - 1];
}

/// Index of the sample holding the lower empirical tau-quantile.
inline Eigen::Index hard_quantile_index(const Vector& x, double tau) {
  const SortResult s = hard_sort(x);
  const auto n = static_cast<double>(x.size());
  const auto k = static_cast<Eigen::Index>(std::ceil(tau * n - 1e-12));
  return s.sigma[std::clamp<Eigen::Index>(k, 1, x.size()) - 1];
}

namespace detail {

inline QuantileSpec batch_spec(const Vector& residuals, QuantileSpec spec) {
  require(residuals.size() >= 2, "least_quantile_objective: need at least two residuals");
  require((residuals.array() >= 0.0).all(), "least_quantile_objective: residuals must be nonnegative");
  if (!(spec.t > 0.0)) spec.t = 1.0 / static_cast<double>(residuals.size());
  return spec;
}

}  // namespace detail

/// Soft tau-quantile of absolute residuals. A non-positive `spec.t` selects
/// the default filler 1 / N.
inline double least_quantile_objective(const Vector& residuals, const QuantileSpec& spec) {
  return soft_quantile(residuals, detail::batch_spec(residuals, spec));
}

inline LossWithGradient least_quantile_objective_with_gradient(const Vector& residuals, const QuantileSpec& spec) {
  return soft_quantile_with_gradient(residuals, detail::batch_spec(residuals, spec));
}

}  // namespace softsort
