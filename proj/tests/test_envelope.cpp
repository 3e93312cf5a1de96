#include <doctest.h>

#include <cmath>
#include <random>

#include "fisherfair/envelope.hpp"
#include "fisherfair/errors.hpp"
#include "support.hpp"

using namespace fisherfair;
using nlohmann::json;

namespace {

const std::vector<double> kBeta5{0.8058, 0.8135, 0.7057, 0.6880};
const std::vector<double> kU5{0.1241, 0.3688, 0.2834, 0.5814};

// Midpoint rule for the envelope integral, independent of the sweep.
double riemann_envelope(const MarketInstance& inst, const std::vector<double>& beta, int cells) {
  double total = 0.0;
  const double h = 1.0 / cells;
  for (int j = 0; j < cells; ++j) total += testing::brute_max(inst, beta, (j + 0.5) * h);
  return total * h;
}

}  // namespace

TEST_CASE("four-buyer golden envelope") {
  const MarketInstance inst = testing::example5();
  const auto env = upper_envelope(inst, kBeta5);
  REQUIRE(env.size() == 4);
  CHECK(env.breakpoints[1] == doctest::Approx(0.3713).epsilon(1e-3));
  CHECK(env.breakpoints[2] == doctest::Approx(0.4921).epsilon(1e-3));
  CHECK(env.breakpoints[3] == doctest::Approx(0.8199).epsilon(1e-3));
  CHECK(env.owner == std::vector<int>{3, 0, 1, 2});

  const auto u = winning_utilities(inst, env);
  double weighted = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(u[i] == doctest::Approx(kU5[i]).epsilon(1e-3));
    weighted += kBeta5[i] * kU5[i];
  }
  CHECK(integral(env) == doctest::Approx(weighted).epsilon(1e-3));
}

TEST_CASE("single buyer and tie rule") {
  const json one = {{"budgets", {1.0}}, {"breakpoints", {0.0, 0.5, 1.0}}, {"c", {{1.0, -1.0}}},
                    {"d", {{0.5, 1.5}}}};
  const MarketInstance inst = load_instance(one);
  const auto env = upper_envelope(inst, std::vector<double>{0.7});
  for (int o : env.owner) CHECK(o == 0);
  CHECK(winning_utilities(inst, env)[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(integral(env) == doctest::Approx(0.7).epsilon(1e-14));

  const json twins = {{"budgets", {1.0, 1.0}}, {"breakpoints", {0.0, 1.0}}, {"c", {{0.6}, {0.6}}},
                      {"d", {{0.2}, {0.2}}}};
  const MarketInstance tw = load_instance(twins);
  const auto tenv = upper_envelope(tw, std::vector<double>{0.5, 0.5});
  REQUIRE(tenv.size() == 1);
  CHECK(tenv.owner[0] == 0);
  const auto u = winning_utilities(tw, tenv);
  CHECK(u[0] == doctest::Approx(1.0));
  CHECK(u[1] == 0.0);
}

TEST_CASE("dominated buyer wins nothing") {
  const MarketInstance inst = testing::random_instance(4, 3, 2);
  std::vector<double> beta{0.6, 0.7, 0.8, 0.9};
  // Shrink buyer 1 until it loses everywhere on a dense grid.
  double vmax = 0.0;
  double vmin_others = 1e300;
  for (int j = 0; j <= 20000; ++j) {
    const double theta = j / 20000.0;
    vmax = std::max(vmax, inst.value_at(0, theta));
    double others = 0.0;
    for (std::size_t i = 1; i < 4; ++i) others = std::max(others, beta[i] * inst.value_at(i, theta));
    vmin_others = std::min(vmin_others, others);
  }
  REQUIRE(vmin_others > 0.0);
  beta[0] = 0.5 * vmin_others / vmax;
  for (int j = 0; j <= 20000; ++j) {
    const double theta = j / 20000.0;
    REQUIRE(beta[0] * inst.value_at(0, theta) < testing::brute_max(inst, {0.0, beta[1], beta[2], beta[3]}, theta));
  }
  CHECK(winning_utilities(inst, beta)[0] == 0.0);
}

TEST_CASE("envelope dominance and owner certification on random instances") {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const MarketInstance inst = testing::random_instance(2 + seed % 7, 1 + seed % 5, seed);
    const auto beta = testing::random_beta(inst, rng);
    const auto env = upper_envelope(inst, beta);
    for (int j = 0; j < 1000; ++j) {
      const double theta = unit_uniform(rng);
      CHECK(std::abs(env(theta) - testing::brute_max(inst, beta, theta)) <= 1e-10);
    }
    for (std::size_t m = 0; m < env.size(); ++m) {
      const auto o = static_cast<std::size_t>(env.owner[m]);
      const std::size_t k = env.segment[m];
      for (double x : {env.breakpoints[m], env.breakpoints[m + 1]}) {
        for (std::size_t i = 0; i < inst.buyers(); ++i) {
          CHECK(beta[o] * inst.piece(o, k)(x) >= beta[i] * inst.piece(i, k)(x) - env_tol);
        }
      }
    }
  }
}

TEST_CASE("parallel envelope equals serial") {
  std::mt19937_64 rng(8);
  const MarketInstance inst = testing::random_instance(12, 30, 99);
  const auto beta = testing::random_beta(inst, rng);
  const auto a = upper_envelope(inst, beta, Execution::Serial);
  const auto b = upper_envelope(inst, beta, Execution::Parallel);
  CHECK(a.breakpoints == b.breakpoints);
  CHECK(a.owner == b.owner);
}

TEST_CASE("dual objective against a dense Riemann sum") {
  std::mt19937_64 rng(17);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const MarketInstance inst = testing::random_instance(3 + seed, 2 + seed, 100 + seed);
    const auto beta = testing::random_beta(inst, rng);
    double log_term = 0.0;
    for (std::size_t i = 0; i < inst.buyers(); ++i) log_term += inst.budget(i) * std::log(beta[i]);
    const double oracle = riemann_envelope(inst, beta, 1000000) - log_term;
    CHECK(std::abs(dual_objective(inst, beta) - oracle) <= 1e-5);
  }
}

TEST_CASE("dual objective domain and single-buyer closed form") {
  const MarketInstance inst = testing::example5();
  CHECK_THROWS_AS(dual_objective(inst, std::vector<double>{0.5, 0.0, 0.5, 0.5}), DomainError);
  CHECK_THROWS_AS(dual_objective(inst, std::vector<double>{0.5, 0.5}), DomainError);

  const json one = {{"budgets", {1.0}}, {"breakpoints", {0.0, 1.0}}, {"c", {{0.4}}}, {"d", {{0.3}}}};
  const MarketInstance single = load_instance(one);
  for (double b : {0.2, 0.5, 1.0, 1.7}) {
    CHECK(dual_objective(single, std::vector<double>{b}) == doctest::Approx(b - std::log(b)));
  }
}

TEST_CASE("golden dual objective equals shifted primal at the optimum") {
  const MarketInstance inst = testing::example5();
  double z = 0.0;
  double c = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double b = inst.budget(i);
    z += b * std::log(kU5[i]);
    c += b - b * std::log(b);
  }
  CHECK(dual_objective(inst, kBeta5) == doctest::Approx(z + c).epsilon(1e-3));
}

TEST_CASE("subgradient inequality") {
  std::mt19937_64 rng(23);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const MarketInstance inst = testing::random_instance(2 + seed % 5, 1 + seed % 4, 500 + seed);
    const auto beta = testing::random_beta(inst, rng);
    const auto other = testing::random_beta(inst, rng);
    const auto w = winning_utilities(inst, beta);
    double lin = dual_objective(inst, beta);
    for (std::size_t i = 0; i < inst.buyers(); ++i) {
      lin += (w[i] - inst.budget(i) / beta[i]) * (other[i] - beta[i]);
    }
    CHECK(dual_objective(inst, other) >= lin - 1e-12);
  }
}

TEST_CASE("envelope Hessian matches finite differences of winning utilities") {
  std::mt19937_64 rng(29);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MarketInstance inst = testing::random_instance(3 + seed % 3, 2 + seed % 3, 700 + seed);
    const auto beta = testing::random_beta(inst, rng);
    const auto env = upper_envelope(inst, beta);
    const Eigen::MatrixXd h = envelope_hessian(inst, env);
    const double step = 1e-6;
    for (std::size_t j = 0; j < inst.buyers(); ++j) {
      auto up = beta;
      auto down = beta;
      up[j] += step;
      down[j] -= step;
      const auto wu = winning_utilities(inst, up);
      const auto wd = winning_utilities(inst, down);
      for (std::size_t i = 0; i < inst.buyers(); ++i) {
        const double fd = (wu[i] - wd[i]) / (2.0 * step);
        CHECK(h(i, j) == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
      }
    }
    CHECK(h.isApprox(h.transpose()));
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h).eigenvalues().minCoeff() >= -1e-9);
  }
}

TEST_CASE("unbiased stochastic subgradient: dense theta average matches winning utilities") {
  const MarketInstance inst = testing::example5();
  const int cells = 1000000;
  std::vector<double> avg(inst.buyers(), 0.0);
  for (int j = 0; j < cells; ++j) {
    const double theta = (j + 0.5) / cells;
    std::size_t best = 0;
    double bv = -1.0;
    for (std::size_t i = 0; i < inst.buyers(); ++i) {
      const double v = kBeta5[i] * inst.value_at(i, theta);
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    avg[best] += inst.value_at(best, theta) / cells;
  }
  const auto w = winning_utilities(inst, kBeta5);
  for (std::size_t i = 0; i < inst.buyers(); ++i) CHECK(std::abs(avg[i] - w[i]) <= 1e-3);
}
