#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fisherfair/market_model.hpp"
#include "fisherfair/parallel.hpp"

namespace fisherfair {

inline constexpr double env_tol = 1e-9;

/// Piecewise-linear function on [0, 1]; not necessarily continuous.
///
/// Piece m covers [breakpoints[m], breakpoints[m+1]] and lives inside grid
/// segment segment[m]. owner[m] is the buyer attaining the maximum there (or
/// -1 for functions that are not envelopes).
struct PiecewiseLinearFunction {
  std::vector<double> breakpoints;
  std::vector<LinearPiece> pieces;
  std::vector<int> owner;
  std::vector<std::size_t> segment;

  std::size_t size() const noexcept { return pieces.size(); }
  Interval span(std::size_t m) const noexcept { return {breakpoints[m], breakpoints[m + 1]}; }
  /// Value at theta using the right-continuous piece (the last piece owns 1).
  double operator()(double theta) const noexcept;
  /// Index of the right-continuous piece containing theta.
  std::size_t piece_of(double theta) const noexcept;
};

/// Utility prices beta: one positive scalar per buyer.
using UtilityPrices = std::vector<double>;

/// Lower and upper bound of the box that contains the optimal utility prices.
struct PriceBox {
  std::vector<double> lower;
  std::vector<double> upper;
};

/// [B_i, 1] in linear mode, [B_i / (v_i(Theta) + B_i), 1] in quasilinear mode.
PriceBox price_box(const MarketInstance& instance);

/// Exact upper envelope max_i beta_i v_i. Within each grid segment the lines are
/// swept left to right; owners break ties by larger slope, then smallest index.
PiecewiseLinearFunction upper_envelope(const MarketInstance& instance,
                                       std::span<const double> beta,
                                       Execution exec = Execution::Serial);

double integral(const PiecewiseLinearFunction& f) noexcept;

/// Per-buyer utility over the pieces it owns: the selected subgradient of
/// beta -> integral(max_i beta_i v_i).
std::vector<double> winning_utilities(const MarketInstance& instance,
                                      const PiecewiseLinearFunction& envelope);
std::vector<double> winning_utilities(const MarketInstance& instance,
                                      std::span<const double> beta,
                                      Execution exec = Execution::Serial);

/// Winning utility of buyer i inside grid segment k, laid out i * K + k.
std::vector<double> winning_segment_utilities(const MarketInstance& instance,
                                              const PiecewiseLinearFunction& envelope);

/// integral(max_i beta_i v_i) - sum_i B_i log beta_i. Throws DomainError when
/// some beta_i <= 0, or in quasilinear mode when some beta_i exceeds 1.
double dual_objective(const MarketInstance& instance, std::span<const double> beta);
double dual_objective(const MarketInstance& instance, std::span<const double> beta,
                      const PiecewiseLinearFunction& envelope);

/// Hessian of beta -> integral(max_i beta_i v_i), from the motion of the
/// envelope's interior crossings. Positive semidefinite.
Eigen::MatrixXd envelope_hessian(const MarketInstance& instance,
                                 const PiecewiseLinearFunction& envelope);

}  // namespace fisherfair
