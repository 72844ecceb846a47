#pragma once

// Desk-scale least-quantile regression: a small fully connected predictor
// trained by minibatch descent on the tau-quantile of absolute residuals.
// Two modes share everything but the batch gradient:
//   * soft   (epsilon > 0): gradient of the soft tau-quantile of the batch;
//   * baseline (epsilon == 0): gradient of the single residual sitting at the
//     empirical tau-quantile of the batch.

#include <softsort/core.hpp>
#include <softsort/io.hpp>
#include <softsort/losses.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace softsort {

/// Feed-forward net with ReLU hidden layers and a scalar output. No hidden
/// layers gives a linear model. Parameters live in one flat vector, layer by
/// layer: W_l (out x in, column-major) then b_l.
class Predictor {
 public:
  Predictor(Eigen::Index input_dim, std::vector<Eigen::Index> hidden) : dims_{input_dim} {
    detail::require(input_dim >= 1, "Predictor: input dimension must be >= 1");
    for (auto h : hidden) {
      detail::require(h >= 1, "Predictor: hidden sizes must be >= 1");
      dims_.push_back(h);
    }
    dims_.push_back(1);
    Eigen::Index total = 0;
    for (std::size_t l = 1; l < dims_.size(); ++l) {
      offsets_.push_back(total);
      total += dims_[l] * dims_[l - 1] + dims_[l];
    }
    params_ = Vector::Zero(total);
  }

  void initialize(std::mt19937_64& rng) {
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(dims_[l])));
      auto w = weight(l);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = normal(rng);
      bias(l).setZero();
    }
  }

  Eigen::Index num_params() const { return params_.size(); }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }

  Vector predict(const Matrix& features) const {
    std::vector<Matrix> acts;
    return forward(features, acts);
  }

  /// Gradient of sum_r cotangent_r * f(features_r) with respect to params.
  Vector backward(const Matrix& features, const Vector& cotangent) const {
    std::vector<Matrix> acts;
    forward(features, acts);
    Vector grad = Vector::Zero(params_.size());
    Matrix g = cotangent.transpose();  // 1 x B
    const std::size_t layers = dims_.size() - 1;
    for (std::size_t l = layers; l-- > 0;) {
      const Eigen::Index off = offsets_[l];
      const Eigen::Index out = dims_[l + 1], in = dims_[l];
      Eigen::Map<Matrix>(grad.data() + off, out, in) = g * acts[l].transpose();
      Eigen::Map<Vector>(grad.data() + off + out * in, out) = g.rowwise().sum();
      if (l > 0) {
        Matrix back = weight(l).transpose() * g;
        g = back.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
      }
    }
    return grad;
  }

 private:
  Eigen::Map<Matrix> weight(std::size_t l) {
    return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<const Matrix> weight(std::size_t l) const {
    return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<Vector> bias(std::size_t l) {
    return {params_.data() + offsets_[l] + dims_[l + 1] * dims_[l], dims_[l + 1]};
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    return {params_.data() + offsets_[l] + dims_[l + 1] * dims_[l], dims_[l + 1]};
  }

  // acts[l] is the input of layer l (d_l x B); acts[0] = features^T.
  Vector forward(const Matrix& features, std::vector<Matrix>& acts) const {
    detail::require(features.cols() == dims_.front(), "Predictor: feature dimension mismatch");
    acts.clear();
    acts.push_back(features.transpose());
    const std::size_t layers = dims_.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      Matrix z = weight(l) * acts.back();
      z.colwise() += bias(l);
      if (l + 1 < layers) {
        acts.push_back(z.cwiseMax(0.0));
      } else {
        return z.row(0).transpose();
      }
    }
    return {};
  }

  std::vector<Eigen::Index> dims_;
  std::vector<Eigen::Index> offsets_;
  Vector params_;
};

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double step_size = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainConfig {
  double tau = 0.5;
  double epsilon = 1e-2;  // 0 selects the empirical-quantile baseline
  double filler = 0.0;    // soft-quantile filler t; <= 0 means 1 / batch size
  double eta = 1e-3;
  int max_iters = 5000;
  Eigen::Index batch_size = 512;
  int epochs = 10;
  std::uint64_t seed = 0;
  std::vector<Eigen::Index> hidden{};
  OptimizerConfig optimizer{};
};

struct TraceRow {
  int epoch = 0;
  double train_quantile = 0.0;
  double test_quantile = 0.0;
  double mse = 0.0;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  bool aborted = false;
  std::string diagnostics;
  Vector params;
};

inline Vector absolute_residuals(const Predictor& model, const Dataset& data) {
  return (data.response - model.predict(data.features)).cwiseAbs();
}

/// One trace row per epoch plus the initial state (epoch 0). Quantiles in the
/// trace are the hard (lower empirical) tau-quantiles of absolute residuals
/// over the whole split; `mse` is measured on the test split.
inline TrainTrace train_least_quantile(const Dataset& train, const Dataset& test, const TrainConfig& cfg) {
  detail::require(train.size() >= 2 && test.size() >= 1, "train_least_quantile: datasets too small");
  detail::require(train.dim() == test.dim(), "train_least_quantile: train/test dimension mismatch");
  detail::require(cfg.tau > 0.0 && cfg.tau < 1.0, "train_least_quantile: tau must lie in (0,1)");
  detail::require(cfg.epsilon >= 0.0, "train_least_quantile: epsilon must be >= 0");
  detail::require(cfg.batch_size >= 2 && cfg.epochs >= 0, "train_least_quantile: bad batch size or epochs");
  detail::require(cfg.optimizer.step_size >= 0.0, "train_least_quantile: step size must be >= 0");

  std::mt19937_64 rng(cfg.seed);
  Predictor model(train.dim(), cfg.hidden);
  model.initialize(rng);

  TrainTrace trace;
  auto record = [&](int epoch) {
    const Vector r_train = absolute_residuals(model, train);
    const Vector r_test = absolute_residuals(model, test);
    trace.rows.push_back({epoch, hard_quantile(r_train, cfg.tau), hard_quantile(r_test, cfg.tau),
                          r_test.squaredNorm() / static_cast<double>(r_test.size())});
    return std::isfinite(trace.rows.back().train_quantile) && std::isfinite(trace.rows.back().mse);
  };
  record(0);

  Vector m1 = Vector::Zero(model.num_params()), m2 = Vector::Zero(model.num_params());
  long step = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto bsz = static_cast<Eigen::Index>(stop - start);
      if (bsz < 2) continue;
      Matrix xb(bsz, train.dim());
      Vector zb(bsz);
      for (Eigen::Index r = 0; r < bsz; ++r) {
        xb.row(r) = train.features.row(order[start + r]);
        zb[r] = train.response[order[start + r]];
      }
      const Vector pred = model.predict(xb);
      const Vector resid = (zb - pred).cwiseAbs();

      Vector dq(bsz);
      if (cfg.epsilon > 0.0) {
        QuantileSpec qs;
        qs.tau = cfg.tau;
        qs.t = cfg.filler > 0.0 ? cfg.filler : 1.0 / static_cast<double>(bsz);
        qs.epsilon = cfg.epsilon;
        qs.eta = cfg.eta;
        qs.max_iters = cfg.max_iters;
        dq = least_quantile_objective_with_gradient(resid, qs).gradient;
      } else {
        dq.setZero();
        dq[hard_quantile_index(resid, cfg.tau)] = 1.0;
      }
      // d|z - f| / df = sign(f - z)
      Vector cot(bsz);
      for (Eigen::Index r = 0; r < bsz; ++r) {
        const double s = pred[r] > zb[r] ? 1.0 : (pred[r] < zb[r] ? -1.0 : 0.0);
        cot[r] = dq[r] * s;
      }
      const Vector g = model.backward(xb, cot);
      if (!g.allFinite()) {
        trace.aborted = true;
        trace.diagnostics = "non-finite gradient at epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
        trace.params = model.params();
        return trace;
      }
      ++step;
      const auto& oc = cfg.optimizer;
      if (oc.kind == OptimizerKind::sgd) {
        model.params() -= oc.step_size * g;
      } else {
        m1 = oc.beta1 * m1 + (1.0 - oc.beta1) * g;
        m2 = oc.beta2 * m2 + (1.0 - oc.beta2) * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(oc.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(oc.beta2, static_cast<double>(step));
        model.params().array() -=
            oc.step_size * (m1.array() / c1) / ((m2.array() / c2).sqrt() + oc.adam_eps);
      }
    }
    if (!record(epoch)) {
      trace.aborted = true;
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << " (max |param| = " << model.params().cwiseAbs().maxCoeff() << ")";
      trace.diagnostics = msg.str();
      break;
    }
  }
  trace.params = model.params();
  return trace;
}

/// z = slope * w + intercept + N(0, noise^2) with w ~ U(-1, 1); a fraction of
/// the responses is shifted up by U(5, 10) to act as gross outliers.
inline Dataset make_linear_dataset(Eigen::Index n, double outlier_fraction, std::uint64_t seed, double slope = 2.0,
                                   double intercept = 1.0, double noise = 0.05) {
  detail::require(n >= 1, "make_linear_dataset: n must be >= 1");
  detail::require(outlier_fraction >= 0.0 && outlier_fraction < 1.0, "make_linear_dataset: bad outlier fraction");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> feature(-1.0, 1.0), shift(5.0, 10.0), coin(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, noise);
  Dataset ds{Matrix(n, 1), Vector(n)};
  for (Eigen::Index r = 0; r < n; ++r) {
    const double w = feature(rng);
    double z = slope * w + intercept + gauss(rng);
    if (coin(rng) < outlier_fraction) z += shift(rng);
    ds.features(r, 0) = w;
    ds.response[r] = z;
  }
  return ds;
}

}  // namespace softsort
