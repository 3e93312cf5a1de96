#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fisherfair/market_model.hpp"

namespace fisherfair {

inline constexpr double lambda_floor = 1e-14;
inline constexpr double mem_tol = 1e-10;

/// A grid segment rewritten as unit-value linear valuations on [0, 1].
///
/// For every buyer, lambda is the value of the segment, and (c_hat, d_hat) is
/// the valuation after mapping [lo, hi] onto [0, 1] and dividing by lambda, so
/// that c_hat / 2 + d_hat == 1. order lists the active buyers (lambda above
/// the floor) by descending d_hat; ties keep ascending buyer index.
struct NormalizedSegment {
  std::size_t index = 0;
  Interval span;
  std::vector<LinearPiece> raw;
  std::vector<double> lambda;
  std::vector<double> c_hat;
  std::vector<double> d_hat;
  std::vector<std::size_t> order;
  std::vector<bool> active;

  std::size_t buyers() const noexcept { return raw.size(); }
  /// 2x2 block mapping (s, t) to (z, w) for adjacent active buyers order[j], order[j+1].
  std::array<double, 4> g_block(std::size_t j) const;
};

NormalizedSegment normalize_segment(std::span<const LinearPiece> pieces, Interval span,
                                    std::size_t index = 0);
NormalizedSegment normalize_segment(const MarketInstance& instance, std::size_t k);

/// Greedy left-to-right cuts in descending-d_hat order fit every u_i. u has
/// one entry per buyer; inactive buyers must ask for (almost) nothing.
bool membership(const NormalizedSegment& segment, std::span<const double> u);

/// Algorithm 1: one interval per buyer, laid out left to right in segment
/// order. Active buyers receive exactly u_i, except the last one asking for
/// positive utility (or the last in order if none does), who takes the rest. Inactive buyers get an empty interval at hi.
/// Throws InfeasibleUtilities when a cut overruns the segment.
std::vector<Interval> partition(const NormalizedSegment& segment, std::span<const double> u);

/// Largest alpha in [0, 1] with alpha * u a member (bisection on membership).
double feasible_scale(const NormalizedSegment& segment, std::span<const double> u);

/// Auxiliary variables of the linear/parabolic representation, indexed by
/// position j in segment order. u_hat has one entry per active buyer; s, t,
/// z, w have one entry per adjacent pair.
struct SegmentAuxiliaries {
  std::vector<double> u_hat;
  std::vector<double> s;
  std::vector<double> t;
  std::vector<double> z;
  std::vector<double> w;
};

/// Auxiliaries realised by cutting [0, 1] at the given normalized points
/// (s_j = cut_j, t_j = cut_j^2, (z_j, w_j) = G_j (s_j, t_j)).
SegmentAuxiliaries auxiliaries_from_cuts(const NormalizedSegment& segment,
                                         std::span<const double> u,
                                         std::span<const double> normalized_cuts);

/// Normalized cut positions of a partition produced for this segment.
std::vector<double> normalized_cuts(const NormalizedSegment& segment,
                                    std::span<const Interval> intervals);

/// Checks every constraint of the representation for utilities u (one per
/// buyer) and the given auxiliaries, with absolute slack tol.
bool satisfies_representation(const NormalizedSegment& segment, std::span<const double> u,
                              const SegmentAuxiliaries& aux, double tol = 1e-9);

enum class ConeType { NonNegative, SecondOrder, Exponential };

std::string to_string(ConeType type);

struct Cone {
  ConeType type;
  std::vector<std::size_t> vars;
};

/// One row of A x = b in sparse form.
struct ConicRow {
  std::vector<std::size_t> cols;
  std::vector<double> vals;
  double rhs = 0.0;
};

/// min c^T x  s.t.  A x = b,  x in a product of nonnegative orthants,
/// 3-dimensional second-order cones {x0 >= ||(x1, x2)||} and exponential cones
/// {x1 exp(x2 / x1) <= x0, x1 > 0} (closure).
struct ConicProgram {
  std::vector<double> objective;
  std::vector<ConicRow> rows;
  std::vector<Cone> cones;
  std::vector<std::string> var_names;
  /// Column of u_ik, laid out i * K + k; absent for inactive pairs.
  std::vector<long> utility_column;
  /// Slack columns, each of which appears in exactly one row.
  std::vector<bool> slack;
  std::size_t buyers = 0;
  std::size_t segments = 0;

  std::size_t variables() const noexcept { return var_names.size(); }
  std::size_t nonzeros() const noexcept;
  std::size_t count(ConeType type) const noexcept;
};

/// Appends the per-segment block of the representation to program, using
/// existing u_ik columns. Returns the number of second-order cones added.
std::size_t build_conic_representation(const NormalizedSegment& segment, ConicProgram& program);

/// The full convex program in standard conic form.
ConicProgram emit_conic_program(const MarketInstance& instance);

/// Maximum absolute row residual of a variable vector (cone membership not included).
double row_residual(const ConicProgram& program, std::span<const double> x);
/// Maximum violation of the cone constraints by a variable vector.
double cone_violation(const ConicProgram& program, std::span<const double> x);

nlohmann::json to_json(const ConicProgram& program);

/// A point of the program realising the per-segment utilities u_ik
/// (i * K + k), built from partition cuts. Throws InfeasibleUtilities when
/// some segment's utilities are not attainable.
std::vector<double> conic_point(const MarketInstance& instance, const ConicProgram& program,
                                std::span<const double> segment_utilities);

/// Maps a solver's variable vector back to per-segment utilities u_ik (i * K + k).
std::vector<double> ingest_solution(const ConicProgram& program, std::span<const double> x);

}  // namespace fisherfair
