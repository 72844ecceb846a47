#pragma once

// Weighted point measures on the real line, ground costs h(y - x), and the
// standardize-then-squash normalization applied to inputs before building
// a cost matrix.

#include <softsort/core.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

namespace softsort {

namespace detail {

// Accepts |sum - 1| <= 1e-12 as is, renormalizes once within 1e-8, rejects
// anything farther off.
inline Vector checked_probability(Vector w, const char* name) {
  require(w.size() >= 1, std::string(name) + " must be nonempty");
  require_finite(w, name);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    require(w[i] > 0.0, std::string(name) + " must be strictly positive");
  }
  const double total = w.sum();
  const double gap = std::abs(total - 1.0);
  if (gap > 1e-8) {
    throw std::invalid_argument(std::string(name) + " must sum to 1 (got " + std::to_string(total) + ")");
  }
  if (gap > 1e-12) w /= total;
  return w;
}

}  // namespace detail

inline Vector uniform_weights(Eigen::Index n) {
  detail::require(n >= 1, "uniform_weights: n must be >= 1");
  return Vector::Constant(n, 1.0 / static_cast<double>(n));
}

/// The grid (0, 1, ..., m-1) / (m-1) on [0,1]. A single point sits at 0.5.
inline Vector regular_grid(Eigen::Index m) {
  detail::require(m >= 1, "regular_grid: m must be >= 1");
  if (m == 1) return Vector::Constant(1, 0.5);
  Vector y(m);
  for (Eigen::Index j = 0; j < m; ++j) y[j] = static_cast<double>(j) / static_cast<double>(m - 1);
  return y;
}

/// Probability weights over an arbitrary real support.
class DiscreteMeasure {
 public:
  DiscreteMeasure(Vector weights, Vector support)
      : weights_(detail::checked_probability(std::move(weights), "weights")), support_(std::move(support)) {
    detail::require(weights_.size() == support_.size(), "weights and support must have equal length");
    detail::require_finite(support_, "support");
  }

  static DiscreteMeasure uniform(Vector support) {
    const auto n = support.size();
    detail::require(n >= 1, "support must be nonempty");
    return DiscreteMeasure(uniform_weights(n), std::move(support));
  }

  const Vector& weights() const { return weights_; }
  const Vector& support() const { return support_; }
  Eigen::Index size() const { return weights_.size(); }

 private:
  Vector weights_;
  Vector support_;
};

/// Target measure: strictly increasing support, probability weights and
/// their cumulative sums.
class TargetDescriptor {
 public:
  TargetDescriptor(Vector weights, Vector support)
      : weights_(detail::checked_probability(std::move(weights), "target weights")), support_(std::move(support)) {
    detail::require(weights_.size() == support_.size(), "target weights and support must have equal length");
    detail::require_finite(support_, "target support");
    for (Eigen::Index j = 1; j < support_.size(); ++j) {
      detail::require(support_[j - 1] < support_[j], "target support must be strictly increasing");
    }
    cumulative_ = detail::cumulative_sum(weights_);
  }

  /// m uniform weights on the regular grid of [0,1].
  static TargetDescriptor uniform_grid(Eigen::Index m) { return TargetDescriptor(uniform_weights(m), regular_grid(m)); }

  /// Given weights on the regular grid of [0,1].
  static TargetDescriptor on_grid(Vector weights) {
    const auto m = weights.size();
    return TargetDescriptor(std::move(weights), regular_grid(m));
  }

  const Vector& weights() const { return weights_; }
  const Vector& support() const { return support_; }
  const Vector& cumulative() const { return cumulative_; }
  Eigen::Index size() const { return weights_.size(); }

 private:
  Vector weights_;
  Vector support_;
  Vector cumulative_;
};

/// h(u) = |u|^p with p >= 1.
struct CostSpec {
  double exponent = 2.0;

  static CostSpec absolute_power(double p) {
    detail::require(std::isfinite(p) && p >= 1.0, "cost exponent must be >= 1");
    return CostSpec{p};
  }

  double operator()(double u) const {
    if (exponent == 2.0) return u * u;
    if (exponent == 1.0) return std::abs(u);
    return std::pow(std::abs(u), exponent);
  }

  // h'(u); for p = 1 the subgradient 0 is used at u = 0.
  double derivative(double u) const {
    const double sign = u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0);
    if (exponent == 2.0) return 2.0 * u;
    if (exponent == 1.0) return sign;
    return exponent * std::pow(std::abs(u), exponent - 1.0) * sign;
  }
};

struct CostMatrix {
  Matrix entries;  // entries(i, j) = h(col_support[j] - row_support[i])
  Vector row_support;
  Vector col_support;

  Eigen::Index rows() const { return entries.rows(); }
  Eigen::Index cols() const { return entries.cols(); }
};

inline CostMatrix build_cost(const Vector& x, const Vector& y, const CostSpec& h) {
  detail::require(x.size() >= 1, "build_cost: x must be nonempty");
  detail::require(y.size() >= 1, "build_cost: y must be nonempty");
  detail::require(h.exponent >= 1.0, "build_cost: cost exponent must be >= 1");
  detail::require_finite(x, "x");
  detail::require_finite(y, "y");
  for (Eigen::Index j = 1; j < y.size(); ++j) {
    detail::require(y[j - 1] < y[j], "build_cost: y must be strictly increasing");
  }
  CostMatrix c{Matrix(x.size(), y.size()), x, y};
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    for (Eigen::Index j = 0; j < y.size(); ++j) c.entries(i, j) = h(y[j] - x[i]);
  }
  return c;
}

enum class Squash { logistic, arctan, none };

inline double squash_scalar(double u, Squash g) {
  switch (g) {
    case Squash::logistic:
      return 1.0 / (1.0 + std::exp(-u));
    case Squash::arctan:
      return 0.5 + std::atan(u) / std::numbers::pi;
    case Squash::none:
      return u;
  }
  return u;
}

inline double squash_scalar_derivative(double u, Squash g) {
  switch (g) {
    case Squash::logistic: {
      const double s = 1.0 / (1.0 + std::exp(-u));
      return s * (1.0 - s);
    }
    case Squash::arctan:
      return 1.0 / (std::numbers::pi * (1.0 + u * u));
    case Squash::none:
      return 1.0;
  }
  return 1.0;
}

/// (x - mean) / (n^{-1/2} ||x - mean||). `scale` is the denominator; a
/// constant input (deviation norm below 1e-12) yields zeros and
/// `degenerate = true`.
struct Standardized {
  Vector values;
  double scale = 0.0;
  bool degenerate = false;
};

inline Standardized standardize(const Vector& x) {
  detail::require(x.size() >= 1, "standardize: x must be nonempty");
  detail::require_finite(x, "x");
  const double n = static_cast<double>(x.size());
  const Vector centered = x.array() - x.mean();
  const double norm = centered.norm();
  if (norm < 1e-12) return {Vector::Zero(x.size()), 0.0, true};
  const double scale = norm / std::sqrt(n);
  return {centered / scale, scale, false};
}

/// Standardize then map elementwise through g. With Squash::none the input
/// is returned unchanged (no standardization either), which is the
/// pipeline's "squashing disabled" setting.
inline Vector squash(const Vector& x, Squash g) {
  detail::require(x.size() >= 1, "squash: x must be nonempty");
  if (g == Squash::none) {
    detail::require_finite(x, "x");
    return x;
  }
  const Standardized s = standardize(x);
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = squash_scalar(s.values[i], g);
  return out;
}

}  // namespace softsort
