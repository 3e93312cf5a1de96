#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fisherfair {

namespace tol {
inline constexpr double grid_eps = 1e-12;   // breakpoint dedup
inline constexpr double c_eps = 1e-12;      // linear-cut fallback
inline constexpr double cut_tol = 1e-10;    // cut/eval roundtrip
inline constexpr double nonneg = 1e-6;      // density nonnegativity at endpoints
inline constexpr double disc_clamp = 1e-10; // tangency roundoff in the cut quadratic
}  // namespace tol

/// One linear piece of a valuation in global coordinates: v(theta) = slope * theta + intercept.
struct LinearPiece {
  double slope = 0.0;
  double intercept = 0.0;

  constexpr double operator()(double theta) const noexcept { return slope * theta + intercept; }
  friend bool operator==(const LinearPiece&, const LinearPiece&) = default;
};

/// Closed subinterval [lo, hi] of the unit interval.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  constexpr double length() const noexcept { return hi - lo; }
  constexpr bool empty() const noexcept { return hi <= lo; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Integral of a linear density over an interval: (c/2)(hi^2 - lo^2) + d (hi - lo).
double eval_interval(const LinearPiece& piece, Interval iv) noexcept;

/// Right endpoint b in [a, segment_end] with eval_interval(piece, [a, b]) == u0.
///
/// Solves the quadratic in the offset b - a using the cancellation-free form
/// 2 u0 / (v(a) + sqrt(v(a)^2 + 2 c u0)), which reduces to u0 / v(a) when the
/// slope vanishes. Throws UnreachableUtility when u0 exceeds the value left in
/// the segment and DegeneratePiece when the piece is identically zero.
double cut(const LinearPiece& piece, double a, double u0, double segment_end);

enum class Mode { Linear, Quasilinear };

std::string to_string(Mode mode);

/// Fisher market over [0, 1] with piecewise-linear valuations on a shared grid.
///
/// pieces are stored row-major: piece(i, k) is buyer i on [grid[k], grid[k+1]].
/// After normalization budgets sum to one; in linear mode each valuation
/// integrates to one and value_scale keeps the factor that was divided out.
class MarketInstance {
 public:
  MarketInstance() = default;
  MarketInstance(Mode mode, std::vector<double> budgets, std::vector<double> grid,
                 std::vector<LinearPiece> pieces);

  Mode mode() const noexcept { return mode_; }
  std::size_t buyers() const noexcept { return budgets_.size(); }
  std::size_t segments() const noexcept { return grid_.empty() ? 0 : grid_.size() - 1; }

  std::span<const double> budgets() const noexcept { return budgets_; }
  double budget(std::size_t i) const noexcept { return budgets_[i]; }
  std::span<const double> grid() const noexcept { return grid_; }
  Interval segment(std::size_t k) const noexcept { return {grid_[k], grid_[k + 1]}; }

  const LinearPiece& piece(std::size_t i, std::size_t k) const noexcept {
    return pieces_[i * segments() + k];
  }
  std::span<const LinearPiece> pieces() const noexcept { return pieces_; }

  /// Buyer i's valuation at theta; at an interior grid point the right segment is used.
  double value_at(std::size_t i, double theta) const noexcept;
  /// Index k of the segment containing theta (right-continuous, last segment owns 1).
  std::size_t segment_of(double theta) const noexcept;
  /// v_i(iv) for an arbitrary interval, split across grid segments.
  double value(std::size_t i, Interval iv) const noexcept;
  /// v_i([0, 1]).
  double total_value(std::size_t i) const noexcept;

  /// Raw-scale multiplier for buyer i's utilities (1 unless the loader rescaled).
  double value_scale(std::size_t i) const noexcept { return value_scale_[i]; }
  /// Common factor budgets were divided by.
  double budget_scale() const noexcept { return budget_scale_; }

  /// Checks every model invariant; throws ValidationError naming the first failure.
  void validate() const;

  /// Budgets sum to one; linear mode also rescales each valuation to unit total value.
  /// Quasilinear mode divides budgets and valuations by the same factor.
  MarketInstance normalized() const;

 private:
  Mode mode_ = Mode::Linear;
  std::vector<double> budgets_;
  std::vector<double> grid_;
  std::vector<LinearPiece> pieces_;
  std::vector<double> value_scale_;
  double budget_scale_ = 1.0;
};

/// Parses, validates, grid-unifies and normalizes an instance document.
///
/// "breakpoints" is either one shared grid (c, d are n x K) or a list of
/// per-buyer grids (c[i], d[i] sized to buyer i's grid), which are merged into
/// their union with coefficients replicated across split segments.
MarketInstance load_instance(const nlohmann::json& document);
MarketInstance load_instance_file(const std::string& path);

/// Random instance document: shared sorted breakpoints, each piece built
/// from two uniform endpoint densities, budgets normalized to sum one.
/// Deterministic per seed.
nlohmann::json sample_instance(std::size_t n, std::size_t segments, std::uint64_t seed,
                               Mode mode = Mode::Linear);

/// Document in the instance file format, using the instance's current scale.
nlohmann::json to_json(const MarketInstance& instance);

}  // namespace fisherfair
