#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fisherfair/envelope.hpp"
#include "fisherfair/market_model.hpp"
#include "fisherfair/parallel.hpp"

namespace fisherfair {

inline constexpr double kkt_tol = 1e-6;

enum class StepSchedule { Newton, SqrtDecay, Polyak };

std::string to_string(StepSchedule schedule);
/// "newton", "sqrt_decay" or "polyak"; throws ValidationError otherwise.
StepSchedule parse_step_schedule(const std::string& name);

struct DualConfig {
  /// 0 picks 200 for Newton and 20000 for the subgradient schedules.
  std::size_t max_iter = 0;
  double gap_tol = 1e-8;
  StepSchedule schedule = StepSchedule::Newton;
  /// Initial step of the sqrt_decay schedule (eta_t = eta0 / sqrt(t)).
  double eta0 = 0.1;
  Execution exec = Execution::Serial;
};

/// Per buyer, the disjoint intervals it receives (at most one per segment),
/// plus intervals nobody receives.
struct PureAllocation {
  std::vector<std::vector<Interval>> intervals;
  std::vector<Interval> leftover;
};

/// <v_i, x_i> for every buyer.
std::vector<double> allocation_values(const MarketInstance& instance,
                                      const PureAllocation& allocation);

struct EquilibriumResult {
  Mode mode = Mode::Linear;
  UtilityPrices beta;
  /// Realised <v_i, x_i> of the allocation.
  std::vector<double> utilities;
  /// Realised utility of buyer i inside segment k, laid out i * K + k.
  std::vector<double> segment_utilities;
  PureAllocation allocation;
  /// max_i beta_i v_i.
  PiecewiseLinearFunction prices;
  double gap = 0.0;
  /// Best gap after each iteration (nonincreasing).
  std::vector<double> gap_history;
  std::size_t iterations = 0;
  /// Quasilinear only: slack delta_i and equilibrium utility <v_i - p, x_i>.
  std::vector<double> delta;
  std::vector<double> ql_utilities;
};

/// sum_i B_i - sum_i B_i log B_i.
double dual_constant(const MarketInstance& instance);

/// Eisenberg-Gale objective of realised utilities w. In quasilinear mode the
/// slack is chosen optimally: delta_i = max(0, B_i - w_i).
double primal_value(const MarketInstance& instance, std::span<const double> values);

/// dual_objective(beta) - (primal_value(values) + C). Nonnegative for any
/// allocation realising values (weak duality).
double duality_gap(const MarketInstance& instance, std::span<const double> beta,
                   std::span<const double> values);

/// Pure allocation realising per-segment utilities u_ik (i * K + k) with
/// Algorithm 1 on every segment. Segments no buyer values become leftover.
PureAllocation allocation_from_segment_utilities(const MarketInstance& instance,
                                                 std::span<const double> segment_utilities);

/// Best certified allocation at the given utility prices: either the winning
/// sets of the envelope or the partition of the targets B_i / beta_i split
/// in proportion to the winning utilities, whichever has the smaller gap.
/// Fills every field except gap_history and iterations.
EquilibriumResult equilibrium_at(const MarketInstance& instance, std::span<const double> beta);

/// Projected descent on the dual objective over the price box until the
/// certified duality gap is at most gap_tol. Buyers with identical valuations
/// are merged for the solve and split by budget afterwards. Throws
/// NotConverged<EquilibriumResult> carrying the best result otherwise.
EquilibriumResult solve(const MarketInstance& instance, const DualConfig& config = {});

/// Quasilinear bookkeeping: at beta_i = 1, delta_i = max(0, B_i - <v_i, x_i>);
/// otherwise delta_i = 0. Equilibrium utility (1 - beta_i) <v_i, x_i>.
void quasilinear_postprocess(const MarketInstance& instance, EquilibriumResult& result);

/// Prices, realised utilities, gap (and quasilinear fields) of a given
/// allocation at the given utility prices.
EquilibriumResult result_from_allocation(const MarketInstance& instance,
                                         std::span<const double> beta, PureAllocation allocation);

/// Result document with normalized and raw-scale quantities.
nlohmann::json to_json(const EquilibriumResult& result, const MarketInstance& instance);

/// Reads beta and the allocation back from a result document; the remaining
/// fields are recomputed against the instance.
EquilibriumResult result_from_json(const nlohmann::json& document, const MarketInstance& instance);

}  // namespace fisherfair
