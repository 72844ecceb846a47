#pragma once

// Unregularized 1D optimal transport. For a convex ground cost the optimal
// coupling between two measures on the line is the north-west corner plan
// built on sorted supports; hard and Kantorovich rank/sort operators are read
// off that plan.

#include <softsort/core.hpp>
#include <softsort/measures.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

namespace softsort {

/// A bijection on {0, ..., n-1}. `one_based()` gives the {1, ..., n} form.
class Permutation {
 public:
  explicit Permutation(std::vector<Eigen::Index> indices) : indices_(std::move(indices)) {
    std::vector<bool> seen(indices_.size(), false);
    for (auto k : indices_) {
      detail::require(k >= 0 && static_cast<std::size_t>(k) < indices_.size() && !seen[k],
                      "Permutation: indices must form a bijection");
      seen[k] = true;
    }
  }

  static Permutation identity(Eigen::Index n) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    return Permutation(std::move(idx));
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(indices_.size()); }
  Eigen::Index operator[](Eigen::Index k) const { return indices_[static_cast<std::size_t>(k)]; }
  const std::vector<Eigen::Index>& indices() const { return indices_; }

  Permutation inverse() const {
    std::vector<Eigen::Index> inv(indices_.size());
    for (std::size_t k = 0; k < indices_.size(); ++k) inv[indices_[k]] = static_cast<Eigen::Index>(k);
    return Permutation(std::move(inv));
  }

  std::vector<int> one_based() const {
    std::vector<int> out(indices_.size());
    for (std::size_t k = 0; k < indices_.size(); ++k) out[k] = static_cast<int>(indices_[k]) + 1;
    return out;
  }

  /// v_sigma, i.e. out[k] = v[sigma[k]].
  Vector apply(const Vector& v) const {
    detail::require(v.size() == size(), "Permutation::apply: size mismatch");
    Vector out(v.size());
    for (Eigen::Index k = 0; k < v.size(); ++k) out[k] = v[(*this)[k]];
    return out;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<Eigen::Index> indices_;
};

struct SortResult {
  Vector sorted;
  Permutation sigma;
};

/// Stable ascending sort; ties keep their original order.
inline SortResult hard_sort(const Vector& x) {
  detail::require(x.size() >= 1, "hard_sort: x must be nonempty");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index l, Eigen::Index r) { return x[l] < x[r]; });
  Permutation sigma(std::move(idx));
  Vector sorted = sigma.apply(x);
  return {std::move(sorted), std::move(sigma)};
}

/// Ranks in {1, ..., n}: the inverse of the stable sorting permutation.
inline std::vector<int> hard_rank(const Vector& x) { return hard_sort(x).sigma.inverse().one_based(); }

struct PlanEntry {
  Eigen::Index row;
  Eigen::Index col;
  double mass;
};

struct TransportPlan {
  Matrix entries;
  Vector row_marginal;
  Vector col_marginal;

  double objective(const CostMatrix& c) const {
    detail::require(c.rows() == entries.rows() && c.cols() == entries.cols(), "objective: shape mismatch");
    return (entries.array() * c.entries.array()).sum();
  }

  Eigen::Index nonzeros(double tol = 0.0) const { return (entries.array().abs() > tol).count(); }

  /// Largest absolute deviation of row/column sums from the marginals.
  double marginal_error() const {
    const double rows = (entries.rowwise().sum() - row_marginal).cwiseAbs().maxCoeff();
    const double cols = (entries.colwise().sum().transpose() - col_marginal).cwiseAbs().maxCoeff();
    return std::max(rows, cols);
  }
};

/// Run-length form of the north-west corner plan: at most n + m - 1 cells,
/// listed from the top-left corner to the bottom-right one.
inline std::vector<PlanEntry> northwest_corner_sparse(const Vector& a, const Vector& b) {
  detail::require(a.size() >= 1 && b.size() >= 1, "northwest_corner: marginals must be nonempty");
  detail::require_finite(a, "a");
  detail::require_finite(b, "b");
  for (Eigen::Index i = 0; i < a.size(); ++i) detail::require(a[i] > 0.0, "northwest_corner: a must be positive");
  for (Eigen::Index j = 0; j < b.size(); ++j) detail::require(b[j] > 0.0, "northwest_corner: b must be positive");
  if (std::abs(a.sum() - 1.0) > 1e-8 || std::abs(b.sum() - 1.0) > 1e-8 || std::abs(a.sum() - b.sum()) > 1e-8) {
    throw std::invalid_argument("northwest_corner: marginals must each carry unit mass");
  }

  // Sweep the merged cumulative breakpoints of a and b. Both totals are
  // pinned to the same endpoint so the last cell closes exactly.
  Vector ca = detail::cumulative_sum(a);
  Vector cb = detail::cumulative_sum(b);
  const double total = ca[ca.size() - 1];
  cb[cb.size() - 1] = total;

  std::vector<PlanEntry> cells;
  cells.reserve(static_cast<std::size_t>(a.size() + b.size() - 1));
  Eigen::Index i = 0, j = 0;
  double lo = 0.0;
  while (i < a.size() && j < b.size()) {
    const double hi = std::min(ca[i], cb[j]);
    if (hi > lo) cells.push_back({i, j, hi - lo});
    lo = std::max(lo, hi);
    const bool row_done = ca[i] <= hi;
    const bool col_done = cb[j] <= hi;
    if (row_done) ++i;
    if (col_done) ++j;
  }
  return cells;
}

inline TransportPlan northwest_corner(const Vector& a, const Vector& b) {
  const auto cells = northwest_corner_sparse(a, b);
  TransportPlan plan{Matrix::Zero(a.size(), b.size()), a, b};
  for (const auto& c : cells) plan.entries(c.row, c.col) += c.mass;
  return plan;
}

/// Optimal plan for any convex h: north-west corner on the weights permuted
/// into sorted order of x, with rows mapped back to the original order.
inline TransportPlan solve_exact(const DiscreteMeasure& source, const TargetDescriptor& target, const CostSpec& h) {
  detail::require(h.exponent >= 1.0, "solve_exact: cost must be convex (p >= 1)");
  const SortResult s = hard_sort(source.support());
  const Vector a_sorted = s.sigma.apply(source.weights());
  const auto cells = northwest_corner_sparse(a_sorted, target.weights());
  TransportPlan plan{Matrix::Zero(source.size(), target.size()), source.weights(), target.weights()};
  for (const auto& c : cells) plan.entries(s.sigma[c.row], c.col) += c.mass;
  return plan;
}

/// n a^{-1} o (P b_cumulative), entries in [0, n].
inline Vector k_rank(const DiscreteMeasure& source, const TargetDescriptor& target, const CostSpec& h) {
  const TransportPlan p = solve_exact(source, target, h);
  const double n = static_cast<double>(source.size());
  return n * (p.entries * target.cumulative()).cwiseQuotient(source.weights());
}

/// b^{-1} o (P^T x), nondecreasing.
inline Vector k_sort(const DiscreteMeasure& source, const TargetDescriptor& target, const CostSpec& h) {
  const TransportPlan p = solve_exact(source, target, h);
  return (p.entries.transpose() * source.support()).cwiseQuotient(target.weights());
}

}  // namespace softsort
