#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "fisherfair/errors.hpp"
#include "fisherfair/solver_dual.hpp"
#include "support.hpp"

using namespace fisherfair;
using nlohmann::json;

namespace {

// sup over buyer i's intervals of p - beta_i v_i (convex in theta, so endpoints suffice
// once the envelope's own breakpoints inside the interval are included).
double comp_slack(const MarketInstance& inst, const EquilibriumResult& r, std::size_t i) {
  double worst = 0.0;
  for (const auto& iv : r.allocation.intervals[i]) {
    std::vector<double> pts{iv.lo, iv.hi};
    for (double b : r.prices.breakpoints) {
      if (b > iv.lo && b < iv.hi) pts.push_back(b);
    }
    for (double x : pts) {
      const double inside = std::clamp(x, iv.lo, std::nextafter(iv.hi, iv.lo));
      worst = std::max(worst, std::abs(testing::brute_max(inst, r.beta, inside) -
                                       r.beta[i] * inst.value_at(i, inside)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("four-buyer golden equilibrium") {
  const MarketInstance inst = testing::example5();
  const auto t0 = std::chrono::steady_clock::now();
  const EquilibriumResult r = solve(inst);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 1.0);
  const double beta[] = {0.8058, 0.8135, 0.7057, 0.6880};
  const double u[] = {0.1241, 0.3688, 0.2834, 0.5814};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.beta[i] == doctest::Approx(beta[i]).epsilon(1e-3));
    CHECK(r.utilities[i] == doctest::Approx(u[i]).epsilon(1e-3));
    CHECK(r.utilities[i] == doctest::Approx(inst.budget(i) / r.beta[i]).epsilon(1e-6));
  }
  CHECK(r.gap <= 1e-8);
  CHECK(r.gap >= -1e-12);
  REQUIRE(r.allocation.intervals[3].size() == 1);
  CHECK(r.allocation.intervals[3][0].hi == doctest::Approx(0.3713).epsilon(1e-3));
  CHECK(r.allocation.intervals[0][0].hi == doctest::Approx(0.4921).epsilon(1e-3));
  CHECK(r.allocation.intervals[1][0].hi == doctest::Approx(0.8199).epsilon(1e-3));
  CHECK(r.allocation.intervals[2][0].hi == doctest::Approx(1.0));
}

TEST_CASE("single buyer takes everything at price one") {
  const json doc = {{"budgets", {2.0}}, {"breakpoints", {0.0, 0.3, 1.0}}, {"c", {{1.0, -0.5}}},
                    {"d", {{0.2, 0.8}}}};
  const MarketInstance inst = load_instance(doc);
  const EquilibriumResult r = solve(inst);
  CHECK(r.beta[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.utilities[0] == doctest::Approx(1.0).epsilon(1e-12));
  double covered = 0.0;
  for (const auto& iv : r.allocation.intervals[0]) covered += iv.length();
  CHECK(covered == doctest::Approx(1.0));
}

TEST_CASE("symmetric buyers split evenly") {
  const json doc = {{"budgets", {1.0, 1.0}}, {"breakpoints", {0.0, 0.5, 1.0}},
                    {"c", {{1.0, -1.0}, {1.0, -1.0}}}, {"d", {{0.5, 1.5}, {0.5, 1.5}}}};
  const MarketInstance inst = load_instance(doc);
  const EquilibriumResult r = solve(inst);
  CHECK(r.beta[0] == doctest::Approx(r.beta[1]).epsilon(1e-12));
  CHECK(r.utilities[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r.utilities[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r.gap <= 1e-8);
}

TEST_CASE("identical pair inside a larger market") {
  json doc = sample_instance(4, 3, 77);
  doc["c"][3] = doc["c"][1];
  doc["d"][3] = doc["d"][1];
  const MarketInstance inst = load_instance(doc);
  const EquilibriumResult r = solve(inst);
  CHECK(r.beta[1] == r.beta[3]);
  CHECK(r.gap <= 1e-8);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.utilities[i] == doctest::Approx(inst.budget(i) / r.beta[i]).epsilon(1e-6));
    CHECK(comp_slack(inst, r, i) <= 1e-6);
  }
}

TEST_CASE("weak duality along random prices") {
  std::mt19937_64 rng(61);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const MarketInstance inst = testing::random_instance(2 + seed % 6, 1 + seed % 4, 1000 + seed);
    const auto beta = testing::random_beta(inst, rng);
    const auto w = winning_utilities(inst, beta);
    bool positive = true;
    for (double x : w) positive = positive && x > 0.0;
    if (!positive) continue;
    CHECK(primal_value(inst, w) + dual_constant(inst) <= dual_objective(inst, beta) + 1e-12);
    const EquilibriumResult at = equilibrium_at(inst, beta);
    CHECK(at.gap >= -1e-12);
  }
}

TEST_CASE("random instances certify with KKT identities") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const MarketInstance inst = testing::random_instance(2 + seed % 9, 1 + seed % 5, 2000 + seed);
    const EquilibriumResult r = solve(inst);
    CHECK(r.gap <= 1e-8);
    for (std::size_t h = 1; h < r.gap_history.size(); ++h) {
      CHECK(r.gap_history[h] <= r.gap_history[h - 1]);
    }
    double mass = 0.0;
    const PriceBox box = price_box(inst);
    for (std::size_t i = 0; i < inst.buyers(); ++i) {
      CHECK(r.utilities[i] == doctest::Approx(inst.budget(i) / r.beta[i]).epsilon(1e-6));
      CHECK(r.beta[i] >= box.lower[i] - 1e-12);
      CHECK(r.beta[i] <= box.upper[i] + 1e-12);
      CHECK(comp_slack(inst, r, i) <= 1e-6);
      CHECK(r.allocation.intervals[i].size() <= inst.segments());
      mass += r.beta[i] * r.utilities[i];
    }
    CHECK(integral(r.prices) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("subgradient schedules reach a loose gap") {
  const MarketInstance inst = testing::example5();
  const EquilibriumResult newton = solve(inst);
  for (auto schedule : {StepSchedule::SqrtDecay, StepSchedule::Polyak}) {
    DualConfig cfg;
    cfg.schedule = schedule;
    cfg.gap_tol = 1e-4;
    cfg.max_iter = 200000;
    const EquilibriumResult r = solve(inst, cfg);
    CHECK(r.gap <= 1e-4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(r.beta[i] - newton.beta[i]) <= 2e-2);
  }
}

TEST_CASE("iteration cap raises NotConverged with the best iterate") {
  DualConfig cfg;
  cfg.max_iter = 1;
  cfg.gap_tol = 1e-14;
  try {
    solve(testing::random_instance(6, 4, 3), cfg);
    FAIL("expected NotConverged");
  } catch (const NotConverged<EquilibriumResult>& e) {
    CHECK(e.gap() > 1e-14);
    CHECK(e.best().beta.size() == 6);
  }
  CHECK(parse_step_schedule("polyak") == StepSchedule::Polyak);
  CHECK_THROWS_AS(parse_step_schedule("adam"), ValidationError);
}

TEST_CASE("result document roundtrip") {
  const MarketInstance inst = testing::example6();
  const EquilibriumResult r = solve(inst);
  const json doc = to_json(r, inst);
  const EquilibriumResult back = result_from_json(json::parse(doc.dump()), inst);
  CHECK(back.gap == doctest::Approx(r.gap).epsilon(1e-9).scale(1.0));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.utilities[i] == doctest::Approx(r.utilities[i]).epsilon(1e-15));
    CHECK(doc["raw"]["utilities"][i].get<double>() ==
          doctest::Approx(r.utilities[i] * inst.value_scale(i)));
  }
  CHECK_THROWS_AS(result_from_json(json{{"beta", {1.0}}}, inst), ValidationError);
}

TEST_CASE("quasilinear: priced-out buyer and budget-light market") {
  // Buyer 2 values little and has the smaller budget.
  const json doc = {{"mode", "quasilinear"}, {"budgets", {0.5, 0.5}}, {"breakpoints", {0.0, 1.0}},
                    {"c", {{0.0}, {0.0}}}, {"d", {{2.0}, {0.01}}}};
  const MarketInstance inst = load_instance(doc);
  const EquilibriumResult r = solve(inst);
  CHECK(r.gap <= 1e-8);
  CHECK(r.beta[1] == doctest::Approx(1.0));
  CHECK(r.utilities[1] <= 1e-9);
  CHECK(r.delta[1] == doctest::Approx(inst.budget(1)));
  CHECK(r.ql_utilities[1] == 0.0);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(r.delta[i] * (1.0 - r.beta[i])) <= 1e-9);

  // Tiny budgets: the cap beta <= 1 never binds, so linear-mode prices (in the
  // same units) reappear.
  json light = sample_instance(3, 2, 5, Mode::Quasilinear);
  for (auto& b : light["budgets"]) b = b.get<double>() * 1e-3;
  const MarketInstance ql = load_instance(light);
  const EquilibriumResult rq = solve(ql);
  light["mode"] = "linear";
  const MarketInstance lin = load_instance(light);
  const EquilibriumResult rl = solve(lin);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rq.beta[i] < 1.0);
    CHECK(rq.delta[i] == 0.0);
    // Same utility share of each buyer's total value in both modes.
    CHECK(rq.utilities[i] / ql.total_value(i) ==
          doctest::Approx(rl.utilities[i] / lin.total_value(i)).epsilon(1e-6));
  }
}
