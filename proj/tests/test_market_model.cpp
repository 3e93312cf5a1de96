#include <doctest.h>

#include <cmath>
#include <random>

#include "fisherfair/errors.hpp"
#include "fisherfair/market_model.hpp"
#include "support.hpp"

using namespace fisherfair;
using nlohmann::json;

TEST_CASE("eval_interval on golden pieces") {
  CHECK(eval_interval({-0.4, 1.2}, {0.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(eval_interval({3.0, -1.0}, {0.4, 0.4}) == 0.0);
  CHECK(eval_interval({-1.8, 1.9}, {0.0, 0.3713}) == doctest::Approx(0.5814).epsilon(1e-3));
}

TEST_CASE("cut on golden pieces") {
  CHECK(cut({-1.8, 1.9}, 0.0, 0.5814, 1.0) == doctest::Approx(0.3713).epsilon(1e-3));
  CHECK(cut({0.7, 0.2}, 0.3, 0.0, 1.0) == 0.3);
  CHECK(cut({0.0, 2.0}, 0.25, 0.5, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("cut errors") {
  CHECK_THROWS_AS(cut({0.0, 1.0}, 0.5, 0.6, 1.0), UnreachableUtility);
  CHECK_THROWS_AS(cut({0.0, 0.0}, 0.0, 0.1, 1.0), DegeneratePiece);
  // Asking for exactly what is left returns the segment end.
  CHECK(cut({0.0, 1.0}, 0.5, 0.5, 1.0) == 1.0);
}

TEST_CASE("eval matches trapezoid; cut matches bisection; roundtrip") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const double lo = 0.8 * unit_uniform(rng);
    const double hi = lo + (1.0 - lo) * (0.05 + 0.95 * unit_uniform(rng));
    const double vlo = 2.0 * unit_uniform(rng);
    const double vhi = trial % 7 == 0 ? 0.0 : 2.0 * unit_uniform(rng);
    const double slope = (vhi - vlo) / (hi - lo);
    const LinearPiece p{slope, vlo - slope * lo};

    const double a = lo + (hi - lo) * unit_uniform(rng);
    const double total = eval_interval(p, {a, hi});
    CHECK(total == doctest::Approx(testing::trapezoid(p, a, hi)).epsilon(1e-12));

    const double u = total * unit_uniform(rng);
    const double b = cut(p, a, u, hi);
    CHECK(b >= a);
    CHECK(b <= hi);
    CHECK(std::abs(eval_interval(p, {a, b}) - u) <= 1e-10);
    if (u > 1e-6 && total - u > 1e-6) {
      CHECK(b == doctest::Approx(testing::bisect_cut(p, a, u, hi)).epsilon(1e-9));
    }
  }
}

TEST_CASE("eval additivity and monotonicity") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const double v0 = unit_uniform(rng);
    const double v1 = unit_uniform(rng);
    const LinearPiece p{v1 - v0, v0};
    double x[3] = {unit_uniform(rng), unit_uniform(rng), unit_uniform(rng)};
    std::sort(x, x + 3);
    const double left = eval_interval(p, {x[0], x[1]});
    const double right = eval_interval(p, {x[1], x[2]});
    const double whole = eval_interval(p, {x[0], x[2]});
    CHECK(std::abs(left + right - whole) <= 1e-12);
    CHECK(left >= -1e-15);
    CHECK(left <= whole + 1e-15);
  }
}

TEST_CASE("load the three-segment golden document") {
  const MarketInstance inst = testing::example6();
  CHECK(inst.buyers() == 4);
  CHECK(inst.segments() == 3);
  CHECK(inst.grid()[1] == doctest::Approx(0.3741));
  double budget_sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    budget_sum += inst.budget(i);
    CHECK(inst.total_value(i) == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(budget_sum == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("single buyer document") {
  const json doc = {{"budgets", {1.0}}, {"breakpoints", {0.0, 1.0}}, {"c", {{0.0}}}, {"d", {{1.0}}}};
  const MarketInstance inst = load_instance(doc);
  CHECK(inst.mode() == Mode::Linear);
  CHECK(inst.buyers() == 1);
  CHECK(inst.piece(0, 0) == LinearPiece{0.0, 1.0});
}

TEST_CASE("load errors name the invariant") {
  const json base = {{"budgets", {1.0, 1.0}},
                     {"breakpoints", {0.0, 0.5, 1.0}},
                     {"c", {{0.0, 0.0}, {0.0, 0.0}}},
                     {"d", {{1.0, 1.0}, {1.0, 1.0}}}};
  auto message = [](const json& doc) {
    try {
      load_instance(doc);
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(message(base) == "accepted");

  json neg = base;
  neg["c"][1][1] = -4.0;  // v(1) = -3 on the last segment
  CHECK(message(neg).find("negative density") != std::string::npos);

  json unsorted = base;
  unsorted["breakpoints"] = {0.0, 0.7, 0.5, 1.0};
  unsorted["c"] = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
  unsorted["d"] = {{1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  CHECK(message(unsorted).find("unsorted grid") != std::string::npos);

  json budget = base;
  budget["budgets"][0] = 0.0;
  CHECK(message(budget).find("nonpositive budget") != std::string::npos);

  json zero = base;
  zero["d"][0] = {0.0, 0.0};
  CHECK(message(zero).find("zero-value buyer") != std::string::npos);

  json missing = base;
  missing.erase("c");
  CHECK(message(missing).find("missing field: c") != std::string::npos);

  json mode = base;
  mode["mode"] = "cobb-douglas";
  CHECK(message(mode).find("mode") != std::string::npos);

  CHECK_THROWS_AS(load_instance_file(testing::data_path("does-not-exist.json")), ValidationError);
}

TEST_CASE("per-buyer grids are merged and coefficients replicated") {
  const json doc = {{"budgets", {1.0, 3.0}},
                    {"breakpoints", {{0.0, 0.5, 1.0}, {0.0, 0.25, 1.0}}},
                    {"c", {{0.0, 2.0}, {1.0, 0.0}}},
                    {"d", {{1.0, 0.0}, {0.0, 0.5}}}};
  const MarketInstance raw_grid = load_instance(doc);
  REQUIRE(raw_grid.segments() == 3);
  CHECK(raw_grid.grid()[1] == 0.25);
  CHECK(raw_grid.grid()[2] == 0.5);
  // Buyer 1 is constant on the first two union segments, then rises.
  CHECK(raw_grid.piece(0, 0) == raw_grid.piece(0, 1));
  CHECK(raw_grid.piece(1, 1) == raw_grid.piece(1, 2));
  // Values survive the merge: compare against the trapezoid of the raw pieces.
  const double v1 = testing::trapezoid({0.0, 1.0}, 0.0, 0.5) + testing::trapezoid({2.0, 0.0}, 0.5, 1.0);
  CHECK(raw_grid.value_scale(0) == doctest::Approx(v1));
  CHECK(raw_grid.budget(1) == doctest::Approx(0.75));
}

TEST_CASE("normalization is idempotent and quasilinear shares one factor") {
  const MarketInstance once = testing::random_instance(5, 4, 21);
  const MarketInstance twice = once.normalized();
  for (std::size_t i = 0; i < once.buyers(); ++i) {
    CHECK(twice.budget(i) == doctest::Approx(once.budget(i)).epsilon(1e-15));
    for (std::size_t k = 0; k < once.segments(); ++k) {
      CHECK(twice.piece(i, k).slope == doctest::Approx(once.piece(i, k).slope).epsilon(1e-14));
      CHECK(twice.piece(i, k).intercept ==
            doctest::Approx(once.piece(i, k).intercept).epsilon(1e-14));
    }
  }

  json doc = sample_instance(3, 2, 4, Mode::Quasilinear);
  for (auto& b : doc["budgets"]) b = b.get<double>() * 4.0;
  const MarketInstance ql = load_instance(doc);
  CHECK(ql.mode() == Mode::Quasilinear);
  CHECK(ql.budget_scale() == doctest::Approx(4.0));
  for (std::size_t i = 0; i < 3; ++i) CHECK(ql.value_scale(i) == doctest::Approx(4.0));
}

TEST_CASE("sampler is deterministic and valid") {
  const json a = sample_instance(4, 3, 7);
  const json b = sample_instance(4, 3, 7);
  CHECK(a.dump() == b.dump());
  CHECK(a.dump() != sample_instance(4, 3, 8).dump());
  CHECK_NOTHROW(load_instance(a));
  for (std::uint64_t seed = 0; seed < 50; ++seed) CHECK_NOTHROW(load_instance(sample_instance(6, 5, seed)));
}

TEST_CASE("value spans segments") {
  const MarketInstance inst = testing::example6();
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    CHECK(inst.value(i, {0.0, 1.0}) == doctest::Approx(inst.total_value(i)).epsilon(1e-14));
    const double split = inst.value(i, {0.1, 0.6}) + inst.value(i, {0.6, 0.9});
    CHECK(split == doctest::Approx(inst.value(i, {0.1, 0.9})).epsilon(1e-13));
  }
}
