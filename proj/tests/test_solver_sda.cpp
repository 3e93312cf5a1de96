#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fisherfair/envelope.hpp"
#include "fisherfair/random.hpp"
#include "fisherfair/solver_dual.hpp"
#include "fisherfair/solver_sda.hpp"
#include "support.hpp"

using namespace fisherfair;
using nlohmann::json;

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("sda first step follows the explicit update") {
  const MarketInstance inst = testing::example5();
  const SdaTrace trace = sda_run(inst, 2, 42);
  REQUIRE(trace.t == std::vector<std::size_t>{1, 2});
  for (double b : trace.beta[0]) CHECK(b == 1.0);

  std::mt19937_64 rng(42);
  const double theta = unit_uniform(rng);
  std::size_t winner = 0;
  for (std::size_t i = 1; i < 4; ++i) {
    if (inst.value_at(i, theta) > inst.value_at(winner, theta)) winner = i;
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const double expect =
        i == winner ? std::clamp(inst.budget(i) / inst.value_at(i, theta), inst.budget(i), 1.0) : 1.0;
    CHECK(trace.beta[1][i] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(trace.beta_avg[1][i] == doctest::Approx(0.5 * (1.0 + expect)).epsilon(1e-15));
  }
}

TEST_CASE("sda stays in the box and is deterministic per seed") {
  const MarketInstance inst = testing::random_instance(5, 3, 8);
  const PriceBox box = price_box(inst);
  const SdaTrace a = sda_run(inst, 5000, 9);
  const SdaTrace b = sda_run(inst, 5000, 9);
  const SdaTrace c = sda_run(inst, 5000, 10);
  CHECK(a.t.back() == 5000);
  CHECK(a.t[a.t.size() - 2] == 4096);
  CHECK(a.beta == b.beta);
  CHECK(a.beta_avg == b.beta_avg);
  CHECK(a.beta_avg.back() != c.beta_avg.back());
  CHECK(a.seed == 9);
  for (const auto& beta : a.beta) {
    for (std::size_t i = 0; i < beta.size(); ++i) {
      CHECK(beta[i] >= box.lower[i]);
      CHECK(beta[i] <= box.upper[i]);
    }
  }
}

TEST_CASE("sda with one buyer stays at price one") {
  const json doc = {{"budgets", {1.0}}, {"breakpoints", {0.0, 1.0}}, {"c", {{1.0}}}, {"d", {{0.5}}}};
  const SdaTrace trace = sda_run(load_instance(doc), 1000, 3);
  for (const auto& beta : trace.beta) CHECK(beta[0] == 1.0);
}

TEST_CASE("sda approaches the deterministic solution") {
  const MarketInstance inst = testing::example5();
  const EquilibriumResult ref = solve(inst);
  const SdaTrace trace = sda_run(inst, 100000, 1, ref.beta);
  CHECK(distance(trace.final_average(), ref.beta) <= 0.05);
  CHECK(trace.sqerr.back() == doctest::Approx(std::pow(distance(trace.final_average(), ref.beta), 2)));

  // Constant valuations with equal budgets: every buyer ends near the symmetric price.
  const json flat = {{"budgets", {1.0, 1.0, 1.0}}, {"breakpoints", {0.0, 1.0}},
                     {"c", {{0.0}, {0.0}, {0.0}}}, {"d", {{1.0}, {1.0}, {1.0}}}};
  const MarketInstance sym = load_instance(flat);
  const EquilibriumResult sref = solve(sym);
  const SdaTrace strace = sda_run(sym, 100000, 4, sref.beta);
  CHECK(distance(strace.final_average(), sref.beta) <= 0.05);
}

TEST_CASE("mse curve: single replication, envelope, parallel agreement") {
  const MarketInstance inst = testing::example5();
  const EquilibriumResult ref = solve(inst);
  const MseCurve one = mse_curve(inst, 4096, 1, 5, ref.beta);
  const SdaTrace run = sda_run(inst, 4096, 5, ref.beta);
  CHECK(one.mse == run.sqerr);

  const MseCurve serial = mse_curve(inst, 4096, 6, 11, ref.beta, Execution::Serial);
  const MseCurve parallel = mse_curve(inst, 4096, 6, 11, ref.beta, Execution::Parallel);
  CHECK(serial.mse == parallel.mse);
  CHECK(serial.final_error.size() == 6);

  for (double t = 8; t < 1e6; t *= 2) CHECK(mse_envelope(inst, 2 * t) < mse_envelope(inst, t));
  // G = 1.9 from the steepest valuation, sigma = 0.1.
  CHECK(value_bound(inst) == doctest::Approx(1.9));
  CHECK(mse_envelope(inst, 1.0) == doctest::Approx(6.0 * 1.9 * 1.9 / 0.01));
}

TEST_CASE("trace csv layout") {
  const MarketInstance inst = testing::example5();
  const std::vector<double> ref{0.8, 0.8, 0.7, 0.7};
  const SdaTrace trace = sda_run(inst, 4, 1, ref);
  std::ostringstream out;
  write_trace_csv(out, trace);
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "t,beta_1,beta_2,beta_3,beta_4,betaavg_1,betaavg_2,betaavg_3,betaavg_4,sqerr");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3);
}
