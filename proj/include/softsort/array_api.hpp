#pragma once

// Flat-array entry points for foreign-function callers. Inputs are
// caller-owned contiguous row-major buffers of shape (S, n) and are only read;
// outputs are freshly allocated row-major buffers. Source weights are uniform
// at this surface.

#include <softsort/losses.hpp>
#include <softsort/sinkhorn.hpp>

#include <span>
#include <vector>

namespace softsort::array_api {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

namespace detail {

inline std::vector<DiscreteMeasure> unpack(std::span<const double> data, Shape shape) {
  softsort::detail::require(shape.rows >= 1 && shape.cols >= 1, "array_api: shape must be at least (1, 1)");
  softsort::detail::require(data.size() == shape.rows * shape.cols, "array_api: buffer size does not match shape");
  std::vector<DiscreteMeasure> batch;
  batch.reserve(shape.rows);
  for (std::size_t s = 0; s < shape.rows; ++s) {
    const auto row = data.subspan(s * shape.cols, shape.cols);
    Vector x = Eigen::Map<const Vector>(row.data(), static_cast<Eigen::Index>(shape.cols));
    softsort::detail::require_finite(x, "array_api input");
    batch.push_back(DiscreteMeasure::uniform(std::move(x)));
  }
  return batch;
}

inline std::vector<double> pack(const Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data(), m.rows(), m.cols()) =
      m;
  return out;
}

}  // namespace detail

/// (S, n) -> (S, n) Sinkhorn ranks against m uniform regular-grid targets
/// (m = 0 means m = n).
inline std::vector<double> s_rank(std::span<const double> data, Shape shape, double epsilon, double eta,
                                  std::size_t m = 0) {
  const auto batch = detail::unpack(data, shape);
  SoftOptions opt;
  opt.sinkhorn.epsilon = epsilon;
  opt.sinkhorn.eta = eta;
  const auto mm = static_cast<Eigen::Index>(m == 0 ? shape.cols : m);
  return detail::pack(s_rank_batched(batch, TargetDescriptor::uniform_grid(mm), opt));
}

/// (S, n) -> (S, m) Sinkhorn sorts.
inline std::vector<double> s_sort(std::span<const double> data, Shape shape, double epsilon, double eta,
                                  std::size_t m = 0) {
  const auto batch = detail::unpack(data, shape);
  SoftOptions opt;
  opt.sinkhorn.epsilon = epsilon;
  opt.sinkhorn.eta = eta;
  const auto mm = static_cast<Eigen::Index>(m == 0 ? shape.cols : m);
  return detail::pack(s_sort_batched(batch, TargetDescriptor::uniform_grid(mm), opt));
}

/// (S, n) -> (S,) soft tau-quantiles, one per row.
inline std::vector<double> soft_quantile(std::span<const double> data, Shape shape, double tau, double t,
                                         double epsilon) {
  const auto batch = detail::unpack(data, shape);
  QuantileSpec spec;
  spec.tau = tau;
  spec.t = t;
  spec.epsilon = epsilon;
  const Matrix sorts = s_sort_batched(batch, spec.target(), spec.options());
  std::vector<double> out(shape.rows);
  for (std::size_t s = 0; s < shape.rows; ++s) out[s] = sorts(static_cast<Eigen::Index>(s), 1);
  return out;
}

/// Per-row soft top-k loss; labels are 1-based.
inline std::vector<double> soft_topk_loss(std::span<const double> data, Shape shape, std::span<const int> labels,
                                          int k, double epsilon) {
  const auto batch = detail::unpack(data, shape);
  softsort::detail::require(labels.size() == shape.rows, "array_api: one label per row required");
  TopKLossSpec spec;
  spec.num_labels = static_cast<int>(shape.cols);
  spec.k = k;
  spec.epsilon = epsilon;
  std::vector<double> out(shape.rows);
  for (std::size_t s = 0; s < shape.rows; ++s) out[s] = softsort::soft_topk_loss(batch[s].support(), labels[s], spec);
  return out;
}

}  // namespace softsort::array_api
