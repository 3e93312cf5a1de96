#include "fisherfair/feasible_utilities.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "fisherfair/errors.hpp"

namespace fisherfair {

std::array<double, 4> NormalizedSegment::g_block(std::size_t j) const {
  const std::size_t a = order[j];
  const std::size_t b = order[j + 1];
  return {d_hat[a], 0.5 * c_hat[a], -d_hat[b], -0.5 * c_hat[b]};
}

NormalizedSegment normalize_segment(std::span<const LinearPiece> pieces, Interval span,
                                    std::size_t index) {
  const std::size_t n = pieces.size();
  NormalizedSegment seg;
  seg.index = index;
  seg.span = span;
  seg.raw.assign(pieces.begin(), pieces.end());
  seg.lambda.assign(n, 0.0);
  seg.c_hat.assign(n, 0.0);
  seg.d_hat.assign(n, 0.0);
  seg.active.assign(n, false);
  const double len = span.length();
  for (std::size_t i = 0; i < n; ++i) {
    const LinearPiece& p = pieces[i];
    const double lam = eval_interval(p, span);
    seg.lambda[i] = lam;
    if (!(lam > lambda_floor)) continue;
    seg.active[i] = true;
    seg.c_hat[i] = len * len * p.slope / lam;
    seg.d_hat[i] = len * (p.slope * span.lo + p.intercept) / lam;
    seg.order.push_back(i);
  }
  std::stable_sort(seg.order.begin(), seg.order.end(), [&](std::size_t a, std::size_t b) {
    return seg.d_hat[a] > seg.d_hat[b];
  });
  return seg;
}

NormalizedSegment normalize_segment(const MarketInstance& instance, std::size_t k) {
  const std::size_t n = instance.buyers();
  std::vector<LinearPiece> pieces(n);
  for (std::size_t i = 0; i < n; ++i) pieces[i] = instance.piece(i, k);
  return normalize_segment(pieces, instance.segment(k), k);
}

namespace {

double slack_for(double scale) { return mem_tol * std::max(1.0, scale); }

// Greedy cuts in segment order. Returns false (and leaves out partial) when
// some request does not fit.
bool greedy(const NormalizedSegment& seg, std::span<const double> u, std::vector<Interval>* out) {
  const std::size_t n = seg.buyers();
  if (u.size() != n) throw ValidationError("utility vector must have one entry per buyer");
  for (std::size_t i = 0; i < n; ++i) {
    if (!seg.active[i] && u[i] > slack_for(0.0)) return false;
    if (u[i] < -slack_for(0.0)) return false;
  }
  if (out) out->assign(n, Interval{seg.span.hi, seg.span.hi});
  double a = seg.span.lo;
  const std::size_t m = seg.order.size();
  // The rest of the segment goes to the last buyer asking for something (or
  // the last buyer in order when nobody asks).
  std::size_t last = m == 0 ? 0 : m - 1;
  for (std::size_t j = m; j-- > 0;) {
    if (u[seg.order[j]] > 0.0) {
      last = j;
      break;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = seg.order[j];
    const LinearPiece& p = seg.raw[i];
    const double want = std::max(0.0, u[i]);
    const double remaining = eval_interval(p, {a, seg.span.hi});
    if (want > remaining + slack_for(seg.lambda[i])) return false;
    double b;
    if (j >= last) {
      b = seg.span.hi;
    } else if (want >= remaining) {
      b = seg.span.hi;
    } else {
      b = cut(p, a, want, seg.span.hi);
    }
    if (out) (*out)[i] = {a, b};
    a = b;
  }
  return true;
}

}  // namespace

bool membership(const NormalizedSegment& segment, std::span<const double> u) {
  return greedy(segment, u, nullptr);
}

std::vector<Interval> partition(const NormalizedSegment& segment, std::span<const double> u) {
  std::vector<Interval> out;
  if (!greedy(segment, u, &out)) {
    std::ostringstream msg;
    msg << "utilities are not attainable on segment " << segment.index + 1 << " ["
        << segment.span.lo << ", " << segment.span.hi << "]";
    throw InfeasibleUtilities(msg.str());
  }
  return out;
}

double feasible_scale(const NormalizedSegment& segment, std::span<const double> u) {
  if (membership(segment, u)) return 1.0;
  std::vector<double> scaled(u.begin(), u.end());
  auto fits = [&](double alpha) {
    for (std::size_t i = 0; i < u.size(); ++i) scaled[i] = alpha * u[i];
    return membership(segment, scaled);
  };
  double lo = 0.0;
  double hi = 1.0;
  if (!fits(lo)) return 0.0;
  for (int it = 0; it < 80 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    (fits(mid) ? lo : hi) = mid;
  }
  return lo;
}

std::vector<double> normalized_cuts(const NormalizedSegment& segment,
                                    std::span<const Interval> intervals) {
  const std::size_t m = segment.order.size();
  std::vector<double> cuts;
  if (m < 2) return cuts;
  const double len = segment.span.length();
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double hi = intervals[segment.order[j]].hi;
    cuts.push_back(std::clamp((hi - segment.span.lo) / len, 0.0, 1.0));
  }
  return cuts;
}

SegmentAuxiliaries auxiliaries_from_cuts(const NormalizedSegment& segment,
                                         std::span<const double> u,
                                         std::span<const double> cuts) {
  const std::size_t m = segment.order.size();
  SegmentAuxiliaries aux;
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = segment.order[j];
    aux.u_hat.push_back(u[i] / segment.lambda[i]);
  }
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double s = cuts[j];
    const double t = s * s;
    const auto g = segment.g_block(j);
    aux.s.push_back(s);
    aux.t.push_back(t);
    aux.z.push_back(g[0] * s + g[1] * t);
    aux.w.push_back(g[2] * s + g[3] * t);
  }
  return aux;
}

bool satisfies_representation(const NormalizedSegment& segment, std::span<const double> u,
                              const SegmentAuxiliaries& aux, double tol) {
  const std::size_t m = segment.order.size();
  for (std::size_t i = 0; i < segment.buyers(); ++i) {
    if (u[i] < -tol) return false;
    if (!segment.active[i] && u[i] > tol) return false;
  }
  if (m == 0) return true;
  if (aux.u_hat.size() != m || aux.s.size() + 1 != m || aux.t.size() + 1 != m ||
      aux.z.size() + 1 != m || aux.w.size() + 1 != m) {
    return false;
  }
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = segment.order[j];
    if (std::abs(u[i] - segment.lambda[i] * aux.u_hat[j]) > tol) return false;
    if (aux.u_hat[j] < -tol) return false;
  }
  if (m == 1) return aux.u_hat[0] <= 1.0 + tol;
  if (aux.u_hat[0] > aux.z[0] + tol) return false;
  for (std::size_t j = 1; j + 1 < m; ++j) {
    if (aux.u_hat[j] > aux.z[j] + aux.w[j - 1] + tol) return false;
  }
  if (aux.u_hat[m - 1] > 1.0 + aux.w[m - 2] + tol) return false;
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const auto g = segment.g_block(j);
    const double s = aux.s[j];
    const double t = aux.t[j];
    if (std::abs(g[0] * s + g[1] * t - aux.z[j]) > tol) return false;
    if (std::abs(g[2] * s + g[3] * t - aux.w[j]) > tol) return false;
    if (s * s > t + tol) return false;
    if (aux.z[j] < -tol || aux.z[j] > 1.0 + tol) return false;
    if (aux.w[j] < -1.0 - tol || aux.w[j] > tol) return false;
    if (aux.z[j] + aux.w[j] < -tol) return false;
  }
  return true;
}

std::string to_string(ConeType type) {
  switch (type) {
    case ConeType::NonNegative:
      return "nonneg";
    case ConeType::SecondOrder:
      return "soc3";
    case ConeType::Exponential:
      return "exp3";
  }
  return "unknown";
}

std::size_t ConicProgram::nonzeros() const noexcept {
  std::size_t nnz = 0;
  for (const auto& r : rows) nnz += r.cols.size();
  return nnz;
}

std::size_t ConicProgram::count(ConeType type) const noexcept {
  return static_cast<std::size_t>(
      std::count_if(cones.begin(), cones.end(), [&](const Cone& c) { return c.type == type; }));
}

namespace {

struct Builder {
  ConicProgram& p;
  std::vector<std::size_t> nonneg;

  std::size_t add_var(std::string name, bool is_nonneg, bool is_slack = false) {
    const std::size_t col = p.var_names.size();
    p.var_names.push_back(std::move(name));
    p.objective.push_back(0.0);
    p.slack.push_back(is_slack);
    if (is_nonneg) nonneg.push_back(col);
    return col;
  }

  void add_row(std::vector<std::size_t> cols, std::vector<double> vals, double rhs) {
    p.rows.push_back({std::move(cols), std::move(vals), rhs});
  }

  // lhs (sum vals * cols) <= rhs, via a nonnegative slack.
  void add_leq(std::vector<std::size_t> cols, std::vector<double> vals, double rhs,
               const std::string& tag) {
    cols.push_back(add_var("slack[" + tag + "]", true, true));
    vals.push_back(1.0);
    add_row(std::move(cols), std::move(vals), rhs);
  }
};

std::string name2(const char* base, std::size_t a, std::size_t b) {
  return std::string(base) + "[" + std::to_string(a + 1) + "," + std::to_string(b + 1) + "]";
}

std::size_t build_block(const NormalizedSegment& seg, Builder& b) {
  ConicProgram& p = b.p;
  const std::size_t k = seg.index;
  const std::size_t m = seg.order.size();
  if (m == 0) return 0;

  std::vector<std::size_t> uhat(m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = seg.order[j];
    uhat[j] = b.add_var(name2("uhat", k, j), true);
    const auto ucol = static_cast<std::size_t>(p.utility_column[i * p.segments + k]);
    b.add_row({ucol, uhat[j]}, {1.0, -seg.lambda[i]}, 0.0);
  }
  if (m == 1) {
    b.add_leq({uhat[0]}, {1.0}, 1.0, name2("chain", k, 0));
    return 0;
  }

  std::vector<std::size_t> z(m - 1), wneg(m - 1);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const auto g = seg.g_block(j);
    const std::size_t s = b.add_var(name2("s", k, j), false);
    const std::size_t t = b.add_var(name2("t", k, j), true);
    z[j] = b.add_var(name2("z", k, j), true);
    wneg[j] = b.add_var(name2("wneg", k, j), true);
    const std::size_t r = b.add_var(name2("r", k, j), false);
    const std::size_t x = b.add_var(name2("x", k, j), false);
    // (z, w) = G (s, t) with w = -wneg.
    b.add_row({z[j], s, t}, {1.0, -g[0], -g[1]}, 0.0);
    b.add_row({wneg[j], s, t}, {1.0, g[2], g[3]}, 0.0);
    // s^2 <= t as r >= ||(x, s)|| with r = (1 + t)/2, x = (1 - t)/2.
    b.add_row({r, x}, {1.0, 1.0}, 1.0);
    b.add_row({r, x, t}, {1.0, -1.0, -1.0}, 0.0);
    p.cones.push_back({ConeType::SecondOrder, {r, x, s}});
    b.add_leq({z[j]}, {1.0}, 1.0, name2("zmax", k, j));
    b.add_leq({wneg[j]}, {1.0}, 1.0, name2("wmax", k, j));
    b.add_leq({wneg[j], z[j]}, {1.0, -1.0}, 0.0, name2("zw", k, j));
  }
  b.add_leq({uhat[0], z[0]}, {1.0, -1.0}, 0.0, name2("chain", k, 0));
  for (std::size_t j = 1; j + 1 < m; ++j) {
    b.add_leq({uhat[j], z[j], wneg[j - 1]}, {1.0, -1.0, 1.0}, 0.0, name2("chain", k, j));
  }
  b.add_leq({uhat[m - 1], wneg[m - 2]}, {1.0, 1.0}, 1.0, name2("chain", k, m - 1));
  return m - 1;
}

}  // namespace

std::size_t build_conic_representation(const NormalizedSegment& segment, ConicProgram& program) {
  Builder b{program, {}};
  if (program.buyers == 0) {
    // Standalone block: create the segment's own utility columns.
    program.buyers = segment.buyers();
    program.segments = segment.index + 1;
    program.utility_column.assign(program.buyers * program.segments, -1);
    for (std::size_t i = 0; i < segment.buyers(); ++i) {
      if (!segment.active[i]) continue;
      program.utility_column[i * program.segments + segment.index] =
          static_cast<long>(b.add_var(name2("u", i, segment.index), true));
    }
  }
  const std::size_t added = build_block(segment, b);
  if (!b.nonneg.empty()) program.cones.push_back({ConeType::NonNegative, b.nonneg});
  return added;
}

ConicProgram emit_conic_program(const MarketInstance& instance) {
  const std::size_t n = instance.buyers();
  const std::size_t K = instance.segments();
  ConicProgram p;
  p.buyers = n;
  p.segments = K;
  p.utility_column.assign(n * K, -1);
  Builder b{p, {}};

  std::vector<NormalizedSegment> segs;
  segs.reserve(K);
  for (std::size_t k = 0; k < K; ++k) segs.push_back(normalize_segment(instance, k));

  std::vector<std::size_t> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = b.add_var("u[" + std::to_string(i + 1) + "]", false);
    const std::size_t one = b.add_var("one[" + std::to_string(i + 1) + "]", false);
    const std::size_t q = b.add_var("q[" + std::to_string(i + 1) + "]", false);
    p.objective[q] = -instance.budget(i);
    b.add_row({one}, {1.0}, 1.0);
    // exp(q / 1) <= u, i.e. q <= log u.
    p.cones.push_back({ConeType::Exponential, {u[i], one, q}});
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> cols{u[i]};
    std::vector<double> vals{1.0};
    for (std::size_t k = 0; k < K; ++k) {
      if (!segs[k].active[i]) continue;
      const std::size_t c = b.add_var(name2("u", i, k), true);
      p.utility_column[i * K + k] = static_cast<long>(c);
      cols.push_back(c);
      vals.push_back(-1.0);
    }
    b.add_row(std::move(cols), std::move(vals), 0.0);
  }
  for (const auto& seg : segs) build_block(seg, b);
  p.cones.push_back({ConeType::NonNegative, b.nonneg});
  return p;
}

double row_residual(const ConicProgram& program, std::span<const double> x) {
  double worst = 0.0;
  for (const auto& r : program.rows) {
    double lhs = 0.0;
    for (std::size_t e = 0; e < r.cols.size(); ++e) lhs += r.vals[e] * x[r.cols[e]];
    worst = std::max(worst, std::abs(lhs - r.rhs));
  }
  return worst;
}

double cone_violation(const ConicProgram& program, std::span<const double> x) {
  double worst = 0.0;
  for (const auto& c : program.cones) {
    switch (c.type) {
      case ConeType::NonNegative:
        for (std::size_t v : c.vars) worst = std::max(worst, -x[v]);
        break;
      case ConeType::SecondOrder:
        worst = std::max(worst, std::hypot(x[c.vars[1]], x[c.vars[2]]) - x[c.vars[0]]);
        break;
      case ConeType::Exponential: {
        const double x0 = x[c.vars[0]];
        const double x1 = x[c.vars[1]];
        const double x2 = x[c.vars[2]];
        if (x1 <= 0.0) {
          worst = std::max(worst, -x1);
        } else {
          worst = std::max(worst, x1 * std::exp(x2 / x1) - x0);
        }
        break;
      }
    }
  }
  return worst;
}

nlohmann::json to_json(const ConicProgram& program) {
  using nlohmann::json;
  json rows = json::array();
  for (const auto& r : program.rows) {
    rows.push_back({{"cols", r.cols}, {"vals", r.vals}, {"rhs", r.rhs}});
  }
  json cones = json::array();
  for (const auto& c : program.cones) cones.push_back({{"type", to_string(c.type)}, {"vars", c.vars}});
  return json{{"objective", program.objective},
              {"rows", std::move(rows)},
              {"cones", std::move(cones)},
              {"var_names", program.var_names},
              {"buyers", program.buyers},
              {"segments", program.segments},
              {"utility_column", program.utility_column}};
}

std::vector<double> conic_point(const MarketInstance& instance, const ConicProgram& program,
                                std::span<const double> segment_utilities) {
  const std::size_t n = instance.buyers();
  const std::size_t K = instance.segments();
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < program.variables(); ++c) col.emplace(program.var_names[c], c);
  std::vector<double> x(program.variables(), 0.0);

  std::vector<double> total(n, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const NormalizedSegment seg = normalize_segment(instance, k);
    std::vector<double> uk(n);
    for (std::size_t i = 0; i < n; ++i) uk[i] = segment_utilities[i * K + k];
    const auto intervals = partition(seg, uk);
    const auto aux = auxiliaries_from_cuts(seg, uk, normalized_cuts(seg, intervals));
    for (std::size_t i = 0; i < n; ++i) {
      total[i] += uk[i];
      const long c = program.utility_column[i * K + k];
      if (c >= 0) x[static_cast<std::size_t>(c)] = uk[i];
    }
    for (std::size_t j = 0; j < aux.u_hat.size(); ++j) x[col.at(name2("uhat", k, j))] = aux.u_hat[j];
    for (std::size_t j = 0; j < aux.s.size(); ++j) {
      x[col.at(name2("s", k, j))] = aux.s[j];
      x[col.at(name2("t", k, j))] = aux.t[j];
      x[col.at(name2("z", k, j))] = aux.z[j];
      x[col.at(name2("wneg", k, j))] = -aux.w[j];
      x[col.at(name2("r", k, j))] = 0.5 * (1.0 + aux.t[j]);
      x[col.at(name2("x", k, j))] = 0.5 * (1.0 - aux.t[j]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "[" + std::to_string(i + 1) + "]";
    x[col.at("u" + id)] = total[i];
    x[col.at("one" + id)] = 1.0;
    x[col.at("q" + id)] = std::log(total[i]);
  }
  // Each slack closes its own row.
  for (const auto& r : program.rows) {
    std::size_t slack_col = program.variables();
    double lhs = 0.0;
    for (std::size_t e = 0; e < r.cols.size(); ++e) {
      if (program.slack[r.cols[e]]) {
        slack_col = r.cols[e];
      } else {
        lhs += r.vals[e] * x[r.cols[e]];
      }
    }
    if (slack_col < program.variables()) x[slack_col] = r.rhs - lhs;
  }
  return x;
}

std::vector<double> ingest_solution(const ConicProgram& program, std::span<const double> x) {
  if (x.size() != program.variables()) {
    throw ValidationError("solution vector has " + std::to_string(x.size()) +
                          " entries, program has " + std::to_string(program.variables()));
  }
  std::vector<double> u(program.buyers * program.segments, 0.0);
  for (std::size_t e = 0; e < u.size(); ++e) {
    const long c = program.utility_column[e];
    if (c >= 0) u[e] = std::max(0.0, x[static_cast<std::size_t>(c)]);
  }
  return u;
}

}  // namespace fisherfair
