#include <softsort/differentiation.hpp>
#include <softsort/losses.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace softsort;
using Catch::Approx;

namespace {

SoftOptions options(double eps, double eta, Squash g = Squash::logistic) {
  SoftOptions o;
  o.sinkhorn.epsilon = eps;
  o.sinkhorn.eta = eta;
  o.sinkhorn.max_iters = 200000;
  o.squash = g;
  return o;
}

double rel_err(const Vector& got, const Vector& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

double seeded(const SoftResult& r, const Vector& sr, const Vector& ss) {
  return sr.dot(r.s_ranks) + ss.dot(r.s_sorts);
}

}  // namespace

TEST_CASE("unrolled VJP", "[diff]") {
  std::mt19937_64 rng(41);
  const TargetDescriptor t = TargetDescriptor::uniform_grid(4);
  const Vector x = oracle::random_vector(rng, 4, -1, 1);
  const Vector a = uniform_weights(4);
  const SoftOptions opt = options(1e-2, 1e-3);
  const Tape tape = record_tape(DiscreteMeasure(a, x), t, opt);

  SECTION("zero seed gives zero gradient") {
    const Gradient g = vjp_unrolled(Vector::Zero(4), Vector::Zero(4), tape);
    REQUIRE(g.x->isZero(0.0));
    REQUIRE(g.weights.isZero(0.0));
    const Gradient e = vjp_unrolled(Vector(), Vector(), tape);
    REQUIRE(e.x->isZero(0.0));
  }
  SECTION("matches central differences of the fixed-iteration map") {
    const Vector w = oracle::random_vector(rng, 4, -1, 1);
    const Vector s = oracle::random_vector(rng, 4, -1, 1);
    const int l = tape.iterations();
    const Gradient g = vjp_unrolled(w, s, tape);

    const auto fx = [&](const Vector& xx) { return seeded(unrolled_forward(a, xx, t, opt, l), w, s); };
    REQUIRE(rel_err(*g.x, finite_diff_check(fx, x, 1e-5).gradient) <= 1e-4);

    const auto fa = [&](const Vector& aa) { return seeded(unrolled_forward(aa, x, t, opt, l), w, s); };
    REQUIRE(rel_err(g.weights, finite_diff_check(fa, a, 1e-5).gradient) <= 1e-4);

    // Ranks only, as in sum_i w_i s_rank_i.
    const Gradient gr = vjp_unrolled(w, Vector(), tape);
    const auto fr = [&](const Vector& xx) { return w.dot(unrolled_forward(a, xx, t, opt, l).s_ranks); };
    REQUIRE(rel_err(*gr.x, finite_diff_check(fr, x, 1e-5).gradient) <= 1e-4);
  }
  SECTION("duplicated inputs get equal components") {
    Vector dup(2);
    dup << 0.3, 0.3;
    for (Squash g : {Squash::none, Squash::logistic}) {
      const Tape tp = record_tape(DiscreteMeasure::uniform(dup), TargetDescriptor::uniform_grid(2), options(1e-2, 1e-6, g));
      const SoftResult r = detail::read_operators(tp.final_state, tp.weights, tp.x, tp.target);
      // sum_i r_i^2 is exchangeable in (x_1, x_2)
      const Gradient gr = vjp_unrolled(2.0 * r.s_ranks, Vector(), tp);
      REQUIRE(gr.support[0] == Approx(gr.support[1]).margin(1e-12));
      if (g == Squash::none) {
        REQUIRE((*gr.x)[0] == Approx((*gr.x)[1]).margin(1e-12));
      } else {
        REQUIRE_FALSE(gr.x.has_value());  // standardization is singular here
      }
    }
  }
  SECTION("constant input gives a constant gradient for symmetric scalars") {
    const Vector c = Vector::Constant(5, -1.25);
    const Tape tp = record_tape(DiscreteMeasure::uniform(c), TargetDescriptor::uniform_grid(3), options(1e-1, 1e-8, Squash::none));
    const SoftResult r = detail::read_operators(tp.final_state, tp.weights, tp.x, tp.target);
    const Gradient gr = vjp_unrolled(2.0 * r.s_ranks, r.s_sorts, tp);
    REQUIRE((gr.x->array() - (*gr.x)[0]).abs().maxCoeff() <= 1e-12);
  }
  SECTION("tape replay is bitwise") {
    REQUIRE(tape.iterations() == tape.final_state.iterations_used);
    REQUIRE(tape.replay_matches());
    Tape tampered = tape;
    tampered.alphas.back()[0] = std::nextafter(tampered.alphas.back()[0], 1e300);
    REQUIRE_FALSE(tampered.replay_matches());
  }
  SECTION("seed length is checked") {
    REQUIRE_THROWS_AS(vjp_unrolled(Vector::Zero(3), Vector(), tape), std::invalid_argument);
    REQUIRE_THROWS_AS(vjp_unrolled(Vector(), Vector::Zero(5), tape), std::invalid_argument);
  }
}

TEST_CASE("implicit Jacobian: scalar case", "[diff][implicit]") {
  // a = b = 1, u v K = 1, K = exp(-h(y - z) / eps), so
  // d log u + d log v = -d log K = -h'/eps; the gauge splits it evenly.
  Vector z(1), y(1);
  z << 0.2;
  y << 0.5;
  const double eps = 0.05;
  const CostSpec h{};
  const Matrix c = build_cost(z, y, h).entries;
  SinkhornConfig cfg;
  cfg.epsilon = eps;
  const SinkhornState st = sinkhorn_log(Vector::Ones(1), Vector::Ones(1), c, cfg);
  const ImplicitJacobian J = jacobian_implicit(st, z, y, h);
  const double u = J.u[0], v = J.v[0];
  REQUIRE(u * v * J.kernel(0, 0) == Approx(1.0).epsilon(1e-14));
  const double hp = h.derivative(y[0] - z[0]) / eps;
  REQUIRE(J.log_jacobian(0, 0) == Approx(-hp / 2).epsilon(1e-12));
  REQUIRE(J.log_jacobian(1, 0) == Approx(-hp / 2).epsilon(1e-12));
  REQUIRE(J.jacobian(0, 0) == Approx(-hp * u / 2).epsilon(1e-12));
  // d log(u v) / dz = -d log K / dz
  REQUIRE(J.jacobian(0, 0) / u + J.jacobian(1, 0) / v == Approx(-hp).epsilon(1e-12));
}

TEST_CASE("implicit Jacobian: blocks and solves", "[diff][implicit]") {
  std::mt19937_64 rng(43);
  const int n = 4, m = 3;
  const double eps = 5e-2;
  const Vector z = oracle::random_vector(rng, n, 0, 1);
  const Vector y = regular_grid(m);
  const Vector a = oracle::random_simplex(rng, n), b = oracle::random_simplex(rng, m);
  const CostSpec h{};
  SinkhornConfig cfg;
  cfg.epsilon = eps;
  cfg.eta = 1e-13;
  cfg.max_iters = 100000;
  const SinkhornState st = sinkhorn_log(a, b, build_cost(z, y, h).entries, cfg);
  REQUIRE(st.converged);
  const ImplicitJacobian J = jacobian_implicit(st, z, y, h);

  // f(z, w) = w o Lambda(z) w - [a; b]
  const auto f = [&](const Vector& zz, const Vector& w) {
    const Matrix k = (-build_cost(zz, y, h).entries.array() / eps).exp().matrix();
    Vector out(n + m);
    out << w.head(n).cwiseProduct(k * w.tail(m)) - a, w.tail(m).cwiseProduct(k.transpose() * w.head(n)) - b;
    return out;
  };
  Vector w(n + m);
  w << J.u, J.v;

  SECTION("system matrix doubles the marginals at the fixed point") {
    Vector ab(n + m);
    ab << a, b;
    REQUIRE((J.system * w - 2.0 * ab).cwiseAbs().maxCoeff() <= 1e-11);
    REQUIRE(f(z, w).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SECTION("blocks agree with finite differences of the fixed-point map") {
    const double step = 1e-6;
    for (int k = 0; k < n + m; ++k) {
      Vector up = w, dn = w;
      up[k] += step * w[k];
      dn[k] -= step * w[k];
      const Vector col = (f(z, up) - f(z, dn)) / (2.0 * step * w[k]);
      REQUIRE(rel_err(J.system.col(k), col) <= 1e-7);
    }
    for (int k = 0; k < n; ++k) {
      Vector up = z, dn = z;
      up[k] += step;
      dn[k] -= step;
      const Vector col = (f(up, w) - f(dn, w)) / (2.0 * step);
      REQUIRE(rel_err(J.rhs.col(k), col) <= 1e-6);
    }
  }
  SECTION("solution satisfies the linearised system in the chosen gauge") {
    REQUIRE(J.scalings_finite);
    REQUIRE((J.system * J.jacobian + J.rhs).cwiseAbs().maxCoeff() <= 1e-9 * J.rhs.cwiseAbs().maxCoeff());
    Vector e(n + m);
    e << Vector::Ones(n), -Vector::Ones(m);
    REQUIRE((e.transpose() * J.log_jacobian).cwiseAbs().maxCoeff() <= 1e-12);
    REQUIRE(J.rcond > 1e-15);
  }
  SECTION("factored and merged forms agree") {
    const Matrix factored = jacobian_implicit_factored(J);
    REQUIRE((factored - J.jacobian).norm() <= 1e-9 * J.jacobian.norm());
  }
  SECTION("non-converged states are refused") {
    SinkhornConfig short_cfg = cfg;
    short_cfg.max_iters = 2;
    const SinkhornState raw = sinkhorn_log(a, b, build_cost(z, y, h).entries, short_cfg);
    REQUIRE_FALSE(raw.converged);
    REQUIRE_THROWS_AS(jacobian_implicit(raw, z, y, h), std::invalid_argument);
  }
}

TEST_CASE("implicit path versus unrolled and differences", "[diff][implicit]") {
  std::mt19937_64 rng(47);
  SECTION("n = m = 3 at eps = 1e-2") {
    // Non-uniform weights: with a = b uniform the plan nearly splits into
    // blocks at this epsilon and Sinkhorn crawls.
    const Vector x = oracle::random_vector(rng, 3, -2, 2);
    const TargetDescriptor t = TargetDescriptor::on_grid(oracle::random_simplex(rng, 3));
    const Tape tape = record_tape(DiscreteMeasure(oracle::random_simplex(rng, 3), x), t, options(1e-2, 1e-10));
    REQUIRE(tape.final_state.converged);
    for (int rep = 0; rep < 5; ++rep) {
      const Vector sr = oracle::random_vector(rng, 3), ss = oracle::random_vector(rng, 3);
      const Gradient gu = vjp_unrolled(sr, ss, tape);
      const Gradient gi = vjp_implicit(sr, ss, tape);
      REQUIRE(rel_err(*gi.x, *gu.x) <= 1e-3);
      REQUIRE(rel_err(gi.support, gu.support) <= 1e-3);
    }
  }
  SECTION("shift along 1_n without squashing") {
    const Vector x = oracle::random_vector(rng, 5, 0, 1);
    const TargetDescriptor t = TargetDescriptor::uniform_grid(4);
    const Vector ones = Vector::Ones(5);
    const double step = 1e-5;
    for (double p : {2.0, 1.5}) {
      SoftOptions opt = options(5e-2, 1e-12, Squash::none);
      opt.cost = CostSpec::absolute_power(p);
      const Tape tape = record_tape(DiscreteMeasure::uniform(x), t, opt);
      const ImplicitJacobian J = jacobian_implicit(tape.final_state, tape.support, t.support(), opt.cost);
      const OutputJacobians oj = implicit_output_jacobians(J, tape.weights, t, x);
      const SoftResult up = sinkhorn_rank_sort(DiscreteMeasure::uniform(x + step * ones), t, opt);
      const SoftResult dn = sinkhorn_rank_sort(DiscreteMeasure::uniform(x - step * ones), t, opt);
      const Vector fd_ranks = (up.s_ranks - dn.s_ranks) / (2.0 * step);
      // Sorts also move through the barycenters: add P^T 1 / b = 1.
      const Vector fd_sorts = (up.s_sorts - dn.s_sorts) / (2.0 * step);
      const Vector j_sorts = oj.sorts * ones + Vector::Ones(4);
      INFO("p = " << p);
      if (p == 2.0) {
        // A shift only adds separable terms to a squared cost; the plan is unchanged.
        REQUIRE((oj.ranks * ones).cwiseAbs().maxCoeff() <= 1e-9);
        REQUIRE(fd_ranks.cwiseAbs().maxCoeff() <= 1e-6);
        REQUIRE((j_sorts - fd_sorts).cwiseAbs().maxCoeff() <= 1e-6);
      } else {
        REQUIRE(fd_ranks.norm() > 1e-2);
        REQUIRE(rel_err(oj.ranks * ones, fd_ranks) <= 1e-4);
        REQUIRE(rel_err(j_sorts, fd_sorts) <= 1e-4);
      }
    }
  }
}

TEST_CASE("finite_diff_check", "[diff]") {
  std::mt19937_64 rng(53);
  const Vector x = oracle::random_vector(rng, 6, -3, 3);
  SECTION("linear") {
    const Vector c = oracle::random_vector(rng, 6);
    const FiniteDifference fd = finite_diff_check([&](const Vector& v) { return c.dot(v); }, x, 1e-3);
    REQUIRE((fd.gradient - c).cwiseAbs().maxCoeff() <= 1e-10);
    REQUIRE(fd.step == 1e-3);
  }
  SECTION("quadratic") {
    const FiniteDifference fd = finite_diff_check([](const Vector& v) { return v.squaredNorm(); }, x, 1e-5);
    REQUIRE((fd.gradient - 2.0 * x).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SECTION("soft quantile") {
    QuantileSpec spec;
    spec.tau = 0.3;
    const Tape tape = record_tape(DiscreteMeasure::uniform(x), spec.target(), spec.options());
    const Gradient g = vjp_unrolled(Vector(), Vector::Unit(3, 1), tape);
    const int l = tape.iterations();
    const auto fn = [&](const Vector& v) {
      return unrolled_forward(uniform_weights(6), v, spec.target(), spec.options(), l).s_sorts[1];
    };
    REQUIRE(rel_err(*g.x, finite_diff_check(fn, x, 1e-5).gradient) <= 1e-4);
    REQUIRE(soft_quantile_with_gradient(x, spec).gradient == *g.x);
  }
  SECTION("step must be positive") {
    REQUIRE_THROWS_AS(finite_diff_check([](const Vector&) { return 0.0; }, x, 0.0), std::invalid_argument);
  }
}

TEST_CASE("gradient oracle triangle", "[diff][property]") {
  std::mt19937_64 rng(59);
  std::uniform_int_distribution<int> sz(2, 6);
  for (int rep = 0; rep < 12; ++rep) {
    const int n = sz(rng);
    const double eps = rep % 2 ? 1e-1 : 1e-2;
    const Vector x = oracle::random_vector(rng, n, -2, 2);
    const Vector a = oracle::random_simplex(rng, n);
    const TargetDescriptor t = TargetDescriptor::on_grid(oracle::random_simplex(rng, n));
    const SoftOptions opt = options(eps, 1e-11);
    const Tape tape = record_tape(DiscreteMeasure(a, x), t, opt);
    REQUIRE(tape.final_state.converged);
    const Vector sr = oracle::random_vector(rng, n), ss = oracle::random_vector(rng, n);
    const Vector gu = *vjp_unrolled(sr, ss, tape).x;
    const Vector gi = *vjp_implicit(sr, ss, tape).x;
    const Vector fd = finite_diff_check(
        [&](const Vector& v) { return seeded(sinkhorn_rank_sort(DiscreteMeasure(a, v), t, opt), sr, ss); }, x, 1e-5)
                          .gradient;
    INFO("n=" << n << " eps=" << eps);
    REQUIRE(rel_err(gu, fd) <= 1e-3);
    REQUIRE(rel_err(gi, fd) <= 1e-3);
    REQUIRE(rel_err(gi, gu) <= 1e-3);
  }
}
