#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "fisherfair/market_model.hpp"
#include "fisherfair/parallel.hpp"
#include "fisherfair/solver_dual.hpp"

namespace fisherfair {

inline constexpr double fair_tol = 1e-6;

struct KktReport {
  /// Price mass of the part of [0, 1] no buyer receives.
  double market_clear_residual = 0.0;
  /// |integral(p) - (sum_i B_i - sum_i delta_i)|.
  double price_mass_residual = 0.0;
  /// Total length covered by more than one buyer.
  double overlap = 0.0;
  /// |<p, x_i> + delta_i - B_i|.
  std::vector<double> budget_residuals;
  /// |<v_i, x_i> + delta_i - B_i / beta_i|.
  std::vector<double> utility_price_residuals;
  /// sup over buyer i's intervals of |p - beta_i v_i|.
  std::vector<double> comp_slack_residuals;
  /// delta_i (1 - beta_i); quasilinear only.
  std::vector<double> ql_delta_residuals;
  double duality_gap = 0.0;
  double tol = kkt_tol;
  bool pass = false;

  double max_residual() const;
};

/// Never throws on a failing allocation; the report says what is off.
KktReport check_equilibrium(const MarketInstance& instance, const PureAllocation& allocation,
                            std::span<const double> beta, double tol = kkt_tol);

struct FairnessReport {
  /// envy[i][j] = <v_i, x_j> / B_j - <v_i, x_i> / B_i.
  std::vector<std::vector<double>> envy;
  double max_envy = 0.0;
  /// u_i - B_i / sum(B) * v_i(Theta).
  std::vector<double> proportionality;
  double min_proportionality = 0.0;
  /// Duality gap at beta_i = B_i / u_i (clamped to the price box); zero only at
  /// an equilibrium, which is Pareto optimal.
  double pareto_gap = 0.0;
  /// All budgets equal: envy is the plain (unweighted) notion.
  bool ceei = false;
  double tol = fair_tol;
  bool pass = false;
};

FairnessReport fairness(const MarketInstance& instance, const PureAllocation& allocation,
                        double tol = fair_tol);
/// Same report for the fractional allocation giving buyer i the share
/// B_i / sum(B) of every item.
FairnessReport proportional_share_fairness(const MarketInstance& instance, double tol = fair_tol);

struct OracleConfig {
  std::size_t max_rounds = 100000;
  /// Stop once the duality gap of the discretized market is at most this.
  double gap_tol = 1e-7;
  Execution exec = Execution::Serial;
};

struct OracleResult {
  std::vector<double> beta;
  std::vector<double> utilities;
  double gap = 0.0;
  std::size_t rounds = 0;
};

/// Item values of m equal cells, laid out j * n + i.
std::vector<double> cell_values(const MarketInstance& instance, std::size_t m);

/// Proportional response dynamics on the market of m equal cells. Linear:
/// b_ij <- B_i v_ij x_ij / u_i. Quasilinear: b_ij <- B_i v_ij x_ij / max(u_i, B_i),
/// beta_i = min(1, B_i / u_i). Throws NotConverged<OracleResult> after max_rounds.
OracleResult discretized_oracle(const MarketInstance& instance, std::size_t m,
                                const OracleConfig& config = {});

nlohmann::json to_json(const KktReport& report);
nlohmann::json to_json(const FairnessReport& report);

}  // namespace fisherfair
