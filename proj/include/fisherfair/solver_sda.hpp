#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "fisherfair/market_model.hpp"
#include "fisherfair/parallel.hpp"

namespace fisherfair {

/// Snapshot of a stochastic dual averaging run at iterations 1, 2, 4, ... and T.
struct SdaTrace {
  std::uint64_t seed = 0;
  std::vector<std::size_t> t;
  /// beta^t and the running average of beta^1..beta^t at each checkpoint.
  std::vector<std::vector<double>> beta;
  std::vector<std::vector<double>> beta_avg;
  /// ||beta_avg - reference||^2, empty without a reference.
  std::vector<double> sqerr;

  const std::vector<double>& final_average() const { return beta_avg.back(); }
};

/// Stochastic dual averaging: theta ~ Unif[0, 1], the winner (smallest index on
/// ties) contributes v_i(theta) to its running average gbar_i, and
/// beta_i = clamp(B_i / gbar_i) over the price box (gbar_i = 0 gives the upper bound).
SdaTrace sda_run(const MarketInstance& instance, std::size_t T, std::uint64_t seed,
                 std::optional<std::span<const double>> reference = std::nullopt);

/// Writes t, beta_1..beta_n, betaavg_1..betaavg_n[, sqerr].
void write_trace_csv(std::ostream& out, const SdaTrace& trace);

/// max_i sup_theta v_i(theta).
double value_bound(const MarketInstance& instance);

/// (6 (1 + log t) + (log t)^2 / 2) / t * G^2 / sigma^2 with sigma = min_i B_i.
double mse_envelope(const MarketInstance& instance, double t);

struct MseCurve {
  std::vector<std::size_t> t;
  std::vector<double> mse;
  std::vector<double> envelope;
  /// Per replication ||beta_avg^T - reference||.
  std::vector<double> final_error;
};

/// Mean squared error of the averaged prices over R runs with seeds
/// seed, seed + 1, ..., seed + R - 1.
MseCurve mse_curve(const MarketInstance& instance, std::size_t T, std::size_t replications,
                   std::uint64_t seed, std::span<const double> reference,
                   Execution exec = Execution::Serial);

}  // namespace fisherfair
