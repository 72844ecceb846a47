#include <softsort/measures.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace softsort;
using Catch::Approx;

TEST_CASE("build_cost evaluates h(y_j - x_i)", "[measures]") {
  SECTION("squared cost on {0,1}") {
    Vector x(2), y(2);
    x << 0, 1;
    y << 0, 1;
    const CostMatrix c = build_cost(x, y, CostSpec{2.0});
    Matrix expected(2, 2);
    expected << 0, 1, 1, 0;
    REQUIRE(c.entries == expected);
  }
  SECTION("absolute cost at a midpoint") {
    Vector x(1), y(2);
    x << 0.5;
    y << 0, 1;
    const CostMatrix c = build_cost(x, y, CostSpec::absolute_power(1.0));
    REQUIRE(c.entries(0, 0) == 0.5);
    REQUIRE(c.entries(0, 1) == 0.5);
  }
  SECTION("matches a double loop entrywise") {
    Vector x(5);
    x << -9, -2, 0.38, 4, 6;
    for (double p : {1.0, 1.5, 2.0, 3.0}) {
      const CostMatrix c = build_cost(x, regular_grid(5), CostSpec::absolute_power(p));
      const Matrix ref = oracle::cost_double_loop(x, regular_grid(5), p);
      REQUIRE(c.rows() == 5);
      REQUIRE(c.cols() == 5);
      REQUIRE((c.entries - ref).cwiseAbs().maxCoeff() <= 1e-12 * ref.cwiseAbs().maxCoeff());
      REQUIRE((c.entries.array() >= 0.0).all());
    }
  }
  SECTION("rejects bad input") {
    Vector y(2);
    y << 1, 0;
    REQUIRE_THROWS_AS(build_cost(Vector(), regular_grid(3), CostSpec{}), std::invalid_argument);
    REQUIRE_THROWS_AS(build_cost(Vector::Zero(2), y, CostSpec{}), std::invalid_argument);
    REQUIRE_THROWS_AS(CostSpec::absolute_power(0.5), std::invalid_argument);
  }
  SECTION("pure function: extra row does not disturb the others") {
    std::mt19937_64 rng(3);
    const Vector x = oracle::random_vector(rng, 4);
    Vector longer(5);
    longer << x, 0.25;
    const Matrix c1 = build_cost(x, regular_grid(3), CostSpec{}).entries;
    const Matrix c2 = build_cost(longer, regular_grid(3), CostSpec{}).entries;
    REQUIRE(c2.topRows(4) == c1);
    REQUIRE(build_cost(x, regular_grid(3), CostSpec{}).entries == c1);
  }
}

TEST_CASE("squash standardizes then maps into [0,1]", "[measures]") {
  SECTION("constant vector falls back to g(0)") {
    for (double c : {-3.0, 0.0, 12.5}) {
      const Vector out = squash(Vector::Constant(3, c), Squash::logistic);
      REQUIRE((out.array() == 0.5).all());
      REQUIRE((squash(Vector::Constant(3, c), Squash::arctan).array() == 0.5).all());
    }
  }
  SECTION("logistic on (-1, 0, 1) matches a scalar evaluation") {
    Vector x(3);
    x << -1, 0, 1;
    // mean 0, ||x|| = sqrt(2), scale = sqrt(2) / sqrt(3)
    const double scale = std::sqrt(2.0) / std::sqrt(3.0);
    const Vector out = squash(x, Squash::logistic);
    for (int i = 0; i < 3; ++i) {
      const double u = x[i] / scale;
      REQUIRE(out[i] == Approx(1.0 / (1.0 + std::exp(-u))).epsilon(1e-14));
    }
    REQUIRE(out[0] == Approx(0.22710251943568419).epsilon(1e-12));
  }
  SECTION("positive affine maps are removed") {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 50; ++rep) {
      const Vector x = oracle::random_vector(rng, 7, -5, 5);
      std::uniform_real_distribution<double> s(0.01, 100.0), c(-50.0, 50.0);
      const double scale = s(rng), shift = c(rng);
      for (Squash g : {Squash::logistic, Squash::arctan}) {
        const Vector a = squash(x, g);
        const Vector b = squash((scale * x).array() + shift, g);
        REQUIRE((a - b).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
    Vector x(5);
    x << 0.38, 4, -2, 6, -9;
    REQUIRE((squash(x, Squash::logistic) - squash((5 * x).array() + 7, Squash::logistic)).cwiseAbs().maxCoeff() <=
            1e-12);
  }
  SECTION("strict order is preserved and range is [0,1]") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 50; ++rep) {
      const Vector x = oracle::random_vector(rng, 9, -3, 3);
      for (Squash g : {Squash::logistic, Squash::arctan}) {
        const Vector z = squash(x, g);
        REQUIRE((z.array() >= 0.0).all());
        REQUIRE((z.array() <= 1.0).all());
        for (int i = 0; i < 9; ++i)
          for (int j = 0; j < 9; ++j)
            if (x[i] < x[j]) REQUIRE(z[i] < z[j]);
      }
    }
  }
  SECTION("none passes input through") {
    Vector x(3);
    x << 0.1, 0.7, 0.3;
    REQUIRE(squash(x, Squash::none) == x);
  }
}

TEST_CASE("measure validation", "[measures]") {
  Vector w(3), s(3);
  w << 0.2, 0.3, 0.5;
  s << 1, 2, 3;
  REQUIRE_NOTHROW(DiscreteMeasure(w, s));

  SECTION("small drift is renormalized") {
    Vector drift = w;
    drift[0] += 5e-9;
    const DiscreteMeasure m(drift, s);
    REQUIRE(m.weights().sum() == Approx(1.0).epsilon(1e-15));
  }
  SECTION("large drift, nonpositive weights and length mismatch are errors") {
    Vector off = w;
    off[0] += 1e-3;
    REQUIRE_THROWS_AS(DiscreteMeasure(off, s), std::invalid_argument);
    Vector neg = w;
    neg[0] = 0.0;
    neg[1] = 0.5;
    REQUIRE_THROWS_AS(DiscreteMeasure(neg, s), std::invalid_argument);
    REQUIRE_THROWS_AS(DiscreteMeasure(w, Vector::Zero(2)), std::invalid_argument);
  }
  SECTION("target support must increase; cumulative weights end at 1") {
    Vector y(3);
    y << 0, 0, 1;
    REQUIRE_THROWS_AS(TargetDescriptor(w, y), std::invalid_argument);
    const TargetDescriptor t = TargetDescriptor::on_grid(w);
    REQUIRE(t.cumulative()[0] == Approx(0.2));
    REQUIRE(t.cumulative()[2] == Approx(1.0));
    REQUIRE(t.support()[1] == 0.5);
  }
  SECTION("regular grid") {
    const Vector y = regular_grid(10);
    REQUIRE(y[0] == 0.0);
    REQUIRE(y[9] == 1.0);
    REQUIRE(y[3] == Approx(3.0 / 9.0));
    REQUIRE(regular_grid(1)[0] == 0.5);
  }
}
