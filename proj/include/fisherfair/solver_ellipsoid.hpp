#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fisherfair/feasible_utilities.hpp"
#include "fisherfair/market_model.hpp"
#include "fisherfair/solver_dual.hpp"

namespace fisherfair {

/// g^T x <= rhs, sparse.
struct LinearConstraint {
  std::vector<std::size_t> cols;
  std::vector<double> vals;
  double rhs = 0.0;
};

/// x[s]^2 <= x[t] + slack.
struct ParabolaConstraint {
  std::size_t s = 0;
  std::size_t t = 0;
  double slack = 0.0;
};

/// The utility program over x = (u_i, u_hat_kj, s_kj, t_kj) with every
/// inequality enlarged by eps. u_ik = lambda_ik u_hat and (z, w) = G(s, t) are
/// substituted, so the feasible region has a nonempty interior.
struct EllipsoidProblem {
  double eps = 0.0;
  std::size_t dim = 0;
  std::vector<double> budgets;
  std::vector<NormalizedSegment> segments;
  std::vector<std::size_t> u_col;
  /// Per segment, column of u_hat / s / t at position j in segment order.
  std::vector<std::vector<std::size_t>> uhat_col;
  std::vector<std::vector<std::size_t>> s_col;
  std::vector<std::vector<std::size_t>> t_col;
  std::vector<LinearConstraint> linear;
  std::vector<ParabolaConstraint> parabolas;
  std::vector<std::string> names;
};

/// Linear mode only; throws ValidationError for quasilinear instances.
EllipsoidProblem build_ellipsoid_problem(const MarketInstance& instance, double eps);

enum class CutKind { None, Linear, Quadratic, Objective };

std::string to_string(CutKind kind);

struct Separation {
  CutKind kind = CutKind::None;  // None: x satisfies every constraint
  std::size_t index = 0;         // violated row or parabola
  std::vector<double> normal;    // dense, dim entries
};

/// Most violated constraint (by distance to its boundary). For a parabola the
/// normal is the tangent-line normal (2 s0, -1) on (s, t).
Separation separation_oracle(const EllipsoidProblem& problem, std::span<const double> x);

/// f(x) = -sum_i B_i log u_i.
double ellipsoid_objective(const EllipsoidProblem& problem, std::span<const double> x);
/// -B_i / u_i on the u_i coordinates, zero elsewhere.
std::vector<double> first_order_oracle(const EllipsoidProblem& problem, std::span<const double> x);

/// Each active buyer takes an equal-length share of every segment.
std::vector<double> uniform_split_point(const EllipsoidProblem& problem);

struct EllipsoidConfig {
  double epsilon = 1e-4;
  /// 0 uses 8 * dim^2 * log(2 + V R / (eps r)).
  std::size_t max_iter = 0;
  bool record_log = false;
};

struct EllipsoidLogRow {
  std::size_t iteration = 0;
  CutKind cut = CutKind::None;
  double objective = 0.0;  // NaN when the center is infeasible
  double log_volume = 0.0; // log sqrt(det P), up to the unit-ball constant
};

struct EllipsoidResult {
  /// After the discount and membership rescue, laid out i * K + k.
  std::vector<double> segment_utilities;
  std::vector<double> utilities;
  std::vector<double> beta;
  PureAllocation allocation;
  /// Perturbation and discount size eps / (2 kappa + K + 1).
  double internal_eps = 0.0;
  /// Target for objective - lower_bound: min(internal_eps, 2 kappa internal_eps^2).
  double objective_tol = 0.0;
  double objective = 0.0;
  double lower_bound = 0.0;
  /// objective - lower_bound <= objective_tol was reached.
  bool certified = false;
  std::size_t dim = 0;
  std::size_t iterations = 0;
  std::size_t separation_calls = 0;
  std::size_t objective_calls = 0;
  /// dim^2 log(2 + V R / (objective_tol r)) with unit constant.
  double call_bound = 0.0;
  std::size_t restarts = 0;
  /// Segments whose discounted utilities needed scaling to be members.
  std::size_t rescued_segments = 0;
  std::vector<EllipsoidLogRow> log;
};

/// Central-cut ellipsoid method on the program enlarged by
/// eps / (2 kappa + K + 1), kappa = 1 / min_i B_i, run until the objective-cut
/// lower bound certifies objective_tol; then the two-stage discount, a
/// membership rescue (proportional scaling) and Algorithm 1.
/// Throws NumericalBreakdown if the shape matrix stays indefinite after restarts.
EllipsoidResult ellipsoid_solve(const MarketInstance& instance, const EllipsoidConfig& config = {});

/// Full result (prices, gap, ...) for the ellipsoid allocation.
EquilibriumResult to_equilibrium(const MarketInstance& instance, const EllipsoidResult& result);

/// iteration, objective, cut, log_volume.
void write_log_csv(std::ostream& out, const EllipsoidResult& result);

}  // namespace fisherfair
