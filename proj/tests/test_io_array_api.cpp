#include <softsort/array_api.hpp>
#include <softsort/io.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace softsort;

TEST_CASE("vector reader", "[io]") {
  std::istringstream ok("# header\n0.38\n  4  \n\n-2 # trailing comment\n6e0\n-9\n");
  const Vector v = read_vector(ok);
  REQUIRE(v.size() == 5);
  REQUIRE(v[0] == 0.38);
  REQUIRE(v[4] == -9);

  std::istringstream bad("1\n2\nthree\n");
  try {
    read_vector(bad, "in.txt");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    REQUIRE(e.line() == 3);
    REQUIRE(std::string(e.what()).find("in.txt:3") != std::string::npos);
  }
  std::istringstream two("1 2\n");
  REQUIRE_THROWS_AS(read_vector(two), ParseError);
  std::istringstream nan("nan\n");
  REQUIRE_THROWS_AS(read_vector(nan), ParseError);
  std::istringstream empty("# nothing\n");
  REQUIRE(read_vector(empty).size() == 0);
}

TEST_CASE("dataset reader", "[io]") {
  std::istringstream ok("# w1,w2,z\n1,2,3\n4;5;6\n7 8\t9\n");
  const Dataset ds = read_dataset(ok);
  REQUIRE(ds.size() == 3);
  REQUIRE(ds.dim() == 2);
  REQUIRE(ds.features(2, 1) == 8);
  REQUIRE(ds.response[1] == 6);

  std::istringstream ragged("1,2,3\n4,5\n");
  try {
    read_dataset(ragged);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    REQUIRE(e.line() == 2);
  }
  std::istringstream single("1\n");
  REQUIRE_THROWS_AS(read_dataset(single), ParseError);
  std::istringstream none("");
  REQUIRE_THROWS_AS(read_dataset(none), ParseError);
}

TEST_CASE("flat array surface", "[array_api]") {
  std::mt19937_64 rng(107);
  const std::size_t rows = 4, cols = 6;
  std::vector<double> data(rows * cols);
  for (auto& d : data) d = std::uniform_real_distribution<double>(-3, 3)(rng);
  const std::vector<double> before = data;
  const array_api::Shape shape{rows, cols};

  SECTION("matches the core batched operators") {
    const auto ranks = array_api::s_rank(data, shape, 1e-2, 1e-6);
    const auto sorts = array_api::s_sort(data, shape, 1e-2, 1e-6, 3);
    REQUIRE(ranks.size() == rows * cols);
    REQUIRE(sorts.size() == rows * 3);
    SoftOptions opt;
    opt.sinkhorn.eta = 1e-6;
    for (std::size_t s = 0; s < rows; ++s) {
      const Vector x = Eigen::Map<const Vector>(data.data() + s * cols, static_cast<Eigen::Index>(cols));
      const Vector r = s_rank(DiscreteMeasure::uniform(x), TargetDescriptor::uniform_grid(6), opt);
      const Vector q = s_sort(DiscreteMeasure::uniform(x), TargetDescriptor::uniform_grid(3), opt);
      for (std::size_t i = 0; i < cols; ++i) REQUIRE(std::abs(ranks[s * cols + i] - r[i]) <= 1e-12);
      for (std::size_t j = 0; j < 3; ++j) REQUIRE(std::abs(sorts[s * 3 + j] - q[j]) <= 1e-12);
    }
    REQUIRE(data == before);
  }
  SECTION("worked example through the surface") {
    const std::vector<double> x{0.38, 4, -2, 6, -9};
    const auto r = array_api::s_rank(x, {1, 5}, 1e-4, 1e-6);
    const std::vector<double> want{3, 4, 2, 5, 1};
    for (std::size_t i = 0; i < 5; ++i) REQUIRE(std::abs(r[i] - want[i]) <= 0.05);
  }
  SECTION("quantile and top-k rows") {
    const auto q = array_api::soft_quantile(data, shape, 0.3, 0.1, 1e-2);
    QuantileSpec spec;
    spec.tau = 0.3;
    const std::vector<int> labels{1, 2, 3, 6};
    const auto loss = array_api::soft_topk_loss(data, shape, labels, 1, 1e-3);
    TopKLossSpec tk;
    tk.num_labels = 6;
    for (std::size_t s = 0; s < rows; ++s) {
      const Vector x = Eigen::Map<const Vector>(data.data() + s * cols, static_cast<Eigen::Index>(cols));
      REQUIRE(std::abs(q[s] - soft_quantile(x, spec)) <= 1e-12);
      REQUIRE(std::abs(loss[s] - soft_topk_loss(x, labels[s], tk)) <= 1e-12);
    }
    REQUIRE(data == before);
  }
  SECTION("shape errors") {
    REQUIRE_THROWS_AS(array_api::s_rank(data, {0, 6}, 1e-2, 1e-3), std::invalid_argument);
    REQUIRE_THROWS_AS(array_api::s_rank(std::span<const double>(), {0, 0}, 1e-2, 1e-3), std::invalid_argument);
    REQUIRE_THROWS_AS(array_api::s_rank(data, {5, 6}, 1e-2, 1e-3), std::invalid_argument);
    std::vector<double> with_nan = data;
    with_nan[3] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(array_api::s_sort(with_nan, shape, 1e-2, 1e-3), std::invalid_argument);
    const std::vector<int> short_labels{1};
    REQUIRE_THROWS_AS(array_api::soft_topk_loss(data, shape, short_labels, 1, 1e-3), std::invalid_argument);
  }
}
