#include "fisherfair/solver_dual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "fisherfair/errors.hpp"
#include "fisherfair/feasible_utilities.hpp"

namespace fisherfair {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kAtOne = 1e-9;
// Newton keeps going past the gap target until |beta_i w_i / B_i - 1| is this small.
constexpr double kStationarity = 1e-10;

double budget_log_sum(const MarketInstance& inst, std::span<const double> beta) {
  double s = 0.0;
  for (std::size_t i = 0; i < beta.size(); ++i) s += inst.budget(i) * std::log(beta[i]);
  return s;
}

std::vector<double> clamp_box(std::span<const double> x, const PriceBox& box) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], box.lower[i], box.upper[i]);
  return out;
}

bool same_piece(const LinearPiece& a, const LinearPiece& b) {
  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-12 * std::max({1.0, std::abs(x), std::abs(y)});
  };
  return close(a.slope, b.slope) && close(a.intercept, b.intercept);
}

// group[i] = representative (smallest index) of buyers with identical valuations.
std::vector<std::size_t> identical_groups(const MarketInstance& inst) {
  const std::size_t n = inst.buyers();
  const std::size_t K = inst.segments();
  std::vector<std::size_t> group(n);
  for (std::size_t i = 0; i < n; ++i) {
    group[i] = i;
    for (std::size_t r = 0; r < i; ++r) {
      if (group[r] != r) continue;
      bool same = true;
      for (std::size_t k = 0; k < K && same; ++k) same = same_piece(inst.piece(i, k), inst.piece(r, k));
      if (same) {
        group[i] = r;
        break;
      }
    }
  }
  return group;
}

struct Iterate {
  std::vector<double> beta;
  double gap = kInf;
};

Iterate descend(const MarketInstance& inst, const DualConfig& cfg, std::vector<double>& history,
                std::size_t& iterations) {
  const std::size_t n = inst.buyers();
  const PriceBox box = price_box(inst);
  const double C = dual_constant(inst);
  const std::size_t max_iter =
      cfg.max_iter > 0 ? cfg.max_iter : (cfg.schedule == StepSchedule::Newton ? 200 : 20000);

  std::vector<double> beta = box.upper;
  Iterate best{beta, kInf};
  double best_gap = kInf;
  for (std::size_t t = 1; t <= max_iter; ++t) {
    iterations = t;
    const auto env = upper_envelope(inst, beta, cfg.exec);
    const auto w = winning_utilities(inst, env);
    const double psi = integral(env) - budget_log_sum(inst, beta);
    const double gap = psi - primal_value(inst, w) - C;
    best_gap = std::min(best_gap, gap);
    history.push_back(best_gap);

    std::vector<double> g(n);
    double stationarity = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = w[i] - inst.budget(i) / beta[i];
      const double room = 1e-12 * std::max(1.0, beta[i]);
      const bool pinned = (beta[i] - box.lower[i] <= room && g[i] > 0.0) ||
                          (box.upper[i] - beta[i] <= room && g[i] < 0.0);
      if (!pinned) stationarity = std::max(stationarity, std::abs(g[i]) * beta[i] / inst.budget(i));
    }
    // Once certified, later Newton iterates are at least as good; keep the latest.
    if (gap < best.gap || (gap <= cfg.gap_tol && cfg.schedule == StepSchedule::Newton)) {
      best = {beta, gap};
    }
    if (best.gap <= cfg.gap_tol &&
        (cfg.schedule != StepSchedule::Newton || stationarity <= kStationarity)) {
      break;
    }

    if (cfg.schedule != StepSchedule::Newton) {
      double eta = cfg.eta0 / std::sqrt(static_cast<double>(t));
      if (cfg.schedule == StepSchedule::Polyak && std::isfinite(gap)) {
        // The gap overestimates psi - psi*, so the Polyak step is capped.
        const double norm2 = std::inner_product(g.begin(), g.end(), g.begin(), 0.0);
        if (norm2 == 0.0) break;
        eta = std::min(eta, gap / norm2);
      }
      for (std::size_t i = 0; i < n; ++i) beta[i] -= eta * g[i];
      beta = clamp_box(beta, box);
      continue;
    }

    // Projected Newton: Newton step on the free coordinates, scaled gradient on
    // coordinates pinned at a bound, Armijo backtracking along the projected arc.
    Eigen::MatrixXd h = envelope_hessian(inst, env);
    std::vector<std::size_t> free_idx;
    std::vector<double> d(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double curv = inst.budget(i) / (beta[i] * beta[i]);
      h(i, i) += curv;
      const double room = 1e-12 * std::max(1.0, beta[i]);
      const bool pinned = (beta[i] - box.lower[i] <= room && g[i] > 0.0) ||
                          (box.upper[i] - beta[i] <= room && g[i] < 0.0);
      if (pinned) {
        d[i] = -g[i] / curv;
      } else {
        free_idx.push_back(i);
      }
    }
    if (!free_idx.empty()) {
      const auto m = static_cast<Eigen::Index>(free_idx.size());
      Eigen::MatrixXd hf(m, m);
      Eigen::VectorXd gf(m);
      for (Eigen::Index a = 0; a < m; ++a) {
        gf(a) = g[free_idx[a]];
        for (Eigen::Index b = 0; b < m; ++b) hf(a, b) = h(free_idx[a], free_idx[b]);
      }
      Eigen::LDLT<Eigen::MatrixXd> ldlt(hf);
      Eigen::VectorXd df = ldlt.solve(-gf);
      if (ldlt.info() != Eigen::Success || !df.allFinite()) df = -gf.cwiseQuotient(hf.diagonal());
      for (Eigen::Index a = 0; a < m; ++a) d[free_idx[a]] = df(a);
    }

    bool moved = false;
    double alpha = 1.0;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      std::vector<double> trial(n);
      for (std::size_t i = 0; i < n; ++i) trial[i] = beta[i] + alpha * d[i];
      trial = clamp_box(trial, box);
      double slope = 0.0;
      double shift = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        slope += g[i] * (trial[i] - beta[i]);
        shift = std::max(shift, std::abs(trial[i] - beta[i]));
      }
      if (shift <= 1e-16) break;
      const double psi_trial =
          integral(upper_envelope(inst, trial, cfg.exec)) - budget_log_sum(inst, trial);
      if (psi_trial <= psi + 1e-4 * slope) {
        beta = std::move(trial);
        moved = true;
        break;
      }
    }
    if (!moved) break;  // no further decrease at double precision
  }
  return best;
}

MarketInstance merged_instance(const MarketInstance& inst, const std::vector<std::size_t>& group,
                               std::vector<std::size_t>& reps) {
  const std::size_t K = inst.segments();
  reps.clear();
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    if (group[i] == i) reps.push_back(i);
  }
  std::vector<double> budgets(reps.size(), 0.0);
  std::vector<LinearPiece> pieces;
  for (std::size_t r = 0; r < reps.size(); ++r) {
    for (std::size_t i = 0; i < inst.buyers(); ++i) {
      if (group[i] == reps[r]) budgets[r] += inst.budget(i);
    }
    for (std::size_t k = 0; k < K; ++k) pieces.push_back(inst.piece(reps[r], k));
  }
  const auto grid = inst.grid();
  return MarketInstance(inst.mode(), budgets, std::vector<double>(grid.begin(), grid.end()),
                        std::move(pieces));
}

// Splits each interval of a merged buyer among its members in proportion to budgets.
PureAllocation split_merged(const MarketInstance& inst, const std::vector<std::size_t>& group,
                            const std::vector<std::size_t>& reps, const PureAllocation& merged) {
  const std::size_t n = inst.buyers();
  PureAllocation out;
  out.intervals.assign(n, {});
  out.leftover = merged.leftover;
  for (std::size_t r = 0; r < reps.size(); ++r) {
    std::vector<std::size_t> members;
    double total_budget = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (group[i] == reps[r]) {
        members.push_back(i);
        total_budget += inst.budget(i);
      }
    }
    for (const Interval& iv : merged.intervals[r]) {
      const std::size_t k = inst.segment_of(0.5 * (iv.lo + iv.hi));
      const LinearPiece& p = inst.piece(reps[r], k);
      const double value = eval_interval(p, iv);
      double a = iv.lo;
      for (std::size_t m = 0; m < members.size(); ++m) {
        double b = iv.hi;
        if (m + 1 < members.size()) {
          b = cut(p, a, std::min(value * inst.budget(members[m]) / total_budget,
                                 eval_interval(p, {a, iv.hi})),
                  iv.hi);
        }
        if (b > a) out.intervals[members[m]].push_back({a, b});
        a = b;
      }
    }
  }
  return out;
}

std::vector<double> realised_segment_utilities(const MarketInstance& inst,
                                               const PureAllocation& alloc) {
  const std::size_t K = inst.segments();
  std::vector<double> u(inst.buyers() * K, 0.0);
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    for (const Interval& iv : alloc.intervals[i]) {
      for (std::size_t k = inst.segment_of(iv.lo); k < K; ++k) {
        const Interval seg = inst.segment(k);
        const double lo = std::max(iv.lo, seg.lo);
        const double hi = std::min(iv.hi, seg.hi);
        if (lo >= iv.hi) break;
        if (hi > lo) u[i * K + k] += eval_interval(inst.piece(i, k), {lo, hi});
      }
    }
  }
  return u;
}

PureAllocation winning_allocation(const MarketInstance& inst, const PiecewiseLinearFunction& env) {
  PureAllocation alloc;
  alloc.intervals.assign(inst.buyers(), {});
  for (std::size_t m = 0; m < env.size(); ++m) {
    const Interval iv = env.span(m);
    if (iv.empty()) continue;
    const LinearPiece& p = env.pieces[m];
    if (p(iv.lo) <= 0.0 && p(iv.hi) <= 0.0) {
      alloc.leftover.push_back(iv);
    } else {
      alloc.intervals[static_cast<std::size_t>(env.owner[m])].push_back(iv);
    }
  }
  return alloc;
}

}  // namespace

std::string to_string(StepSchedule schedule) {
  switch (schedule) {
    case StepSchedule::Newton:
      return "newton";
    case StepSchedule::SqrtDecay:
      return "sqrt_decay";
    case StepSchedule::Polyak:
      return "polyak";
  }
  return "unknown";
}

StepSchedule parse_step_schedule(const std::string& name) {
  if (name == "newton") return StepSchedule::Newton;
  if (name == "sqrt_decay") return StepSchedule::SqrtDecay;
  if (name == "polyak") return StepSchedule::Polyak;
  throw ValidationError("unknown step schedule: " + name);
}

std::vector<double> allocation_values(const MarketInstance& instance,
                                      const PureAllocation& allocation) {
  std::vector<double> w(instance.buyers(), 0.0);
  for (std::size_t i = 0; i < instance.buyers(); ++i) {
    for (const Interval& iv : allocation.intervals[i]) w[i] += instance.value(i, iv);
  }
  return w;
}

double dual_constant(const MarketInstance& instance) {
  double c = 0.0;
  for (double b : instance.budgets()) c += b - b * std::log(b);
  return c;
}

double primal_value(const MarketInstance& instance, std::span<const double> values) {
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double b = instance.budget(i);
    const double w = std::max(0.0, values[i]);
    if (instance.mode() == Mode::Quasilinear && w < b) {
      total += b * std::log(b) - (b - w);
    } else {
      if (w <= 0.0) return -kInf;
      total += b * std::log(w);
    }
  }
  return total;
}

double duality_gap(const MarketInstance& instance, std::span<const double> beta,
                   std::span<const double> values) {
  const double primal = primal_value(instance, values);
  if (!std::isfinite(primal)) return kInf;
  return dual_objective(instance, beta) - primal - dual_constant(instance);
}

PureAllocation allocation_from_segment_utilities(const MarketInstance& instance,
                                                 std::span<const double> segment_utilities) {
  const std::size_t n = instance.buyers();
  const std::size_t K = instance.segments();
  PureAllocation alloc;
  alloc.intervals.assign(n, {});
  std::vector<double> uk(n);
  for (std::size_t k = 0; k < K; ++k) {
    const NormalizedSegment seg = normalize_segment(instance, k);
    if (seg.order.empty()) {
      alloc.leftover.push_back(seg.span);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) uk[i] = segment_utilities[i * K + k];
    const auto parts = partition(seg, uk);
    for (std::size_t i = 0; i < n; ++i) {
      if (!parts[i].empty()) alloc.intervals[i].push_back(parts[i]);
    }
  }
  return alloc;
}

EquilibriumResult equilibrium_at(const MarketInstance& instance, std::span<const double> beta) {
  const std::size_t n = instance.buyers();
  const std::size_t K = instance.segments();
  EquilibriumResult res;
  res.mode = instance.mode();
  res.beta.assign(beta.begin(), beta.end());
  res.prices = upper_envelope(instance, beta);

  PureAllocation winners = winning_allocation(instance, res.prices);
  const auto w_values = allocation_values(instance, winners);
  const double gap_winners = duality_gap(instance, beta, w_values);

  // Targets B_i / beta_i split across segments like the winning utilities.
  const auto wk = winning_segment_utilities(instance, res.prices);
  std::vector<double> target(n * K, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double wi = 0.0;
    for (std::size_t k = 0; k < K; ++k) wi += wk[i * K + k];
    if (wi <= 0.0) continue;
    double ti = instance.budget(i) / beta[i];
    if (instance.mode() == Mode::Quasilinear && beta[i] >= 1.0 - kAtOne) ti = wi;
    for (std::size_t k = 0; k < K; ++k) target[i * K + k] = wk[i * K + k] * ti / wi;
  }
  std::vector<double> uk(n);
  for (std::size_t k = 0; k < K; ++k) {
    const NormalizedSegment seg = normalize_segment(instance, k);
    for (std::size_t i = 0; i < n; ++i) uk[i] = target[i * K + k];
    const double alpha = feasible_scale(seg, uk);
    for (std::size_t i = 0; i < n; ++i) target[i * K + k] *= alpha;
  }
  PureAllocation scaled = allocation_from_segment_utilities(instance, target);
  const auto s_values = allocation_values(instance, scaled);
  const double gap_scaled = duality_gap(instance, beta, s_values);

  if (gap_scaled < gap_winners) {
    res.allocation = std::move(scaled);
    res.utilities = s_values;
    res.gap = gap_scaled;
  } else {
    res.allocation = std::move(winners);
    res.utilities = w_values;
    res.gap = gap_winners;
  }
  res.segment_utilities = realised_segment_utilities(instance, res.allocation);
  if (instance.mode() == Mode::Quasilinear) quasilinear_postprocess(instance, res);
  return res;
}

EquilibriumResult solve(const MarketInstance& instance, const DualConfig& config) {
  const auto group = identical_groups(instance);
  const bool merge =
      std::any_of(group.begin(), group.end(), [i = std::size_t{0}](std::size_t g) mutable {
        return g != i++;
      });

  std::vector<double> history;
  std::size_t iterations = 0;
  EquilibriumResult res;
  if (!merge) {
    const Iterate best = descend(instance, config, history, iterations);
    res = equilibrium_at(instance, best.beta);
  } else {
    std::vector<std::size_t> reps;
    const MarketInstance reduced = merged_instance(instance, group, reps);
    const Iterate best = descend(reduced, config, history, iterations);
    const EquilibriumResult sub = equilibrium_at(reduced, best.beta);
    std::vector<double> beta(instance.buyers());
    for (std::size_t i = 0; i < instance.buyers(); ++i) {
      const std::size_t r = static_cast<std::size_t>(
          std::find(reps.begin(), reps.end(), group[i]) - reps.begin());
      beta[i] = sub.beta[r];
    }
    res.mode = instance.mode();
    res.beta = beta;
    res.prices = upper_envelope(instance, beta);
    res.allocation = split_merged(instance, group, reps, sub.allocation);
    res.utilities = allocation_values(instance, res.allocation);
    res.segment_utilities = realised_segment_utilities(instance, res.allocation);
    res.gap = duality_gap(instance, beta, res.utilities);
    if (instance.mode() == Mode::Quasilinear) quasilinear_postprocess(instance, res);
  }
  res.iterations = iterations;
  res.gap_history = std::move(history);
  if (!(res.gap <= config.gap_tol)) {
    std::ostringstream msg;
    msg << "dual solver stopped after " << iterations << " iterations with duality gap "
        << res.gap << " > " << config.gap_tol;
    throw NotConverged<EquilibriumResult>(msg.str(), res, res.gap);
  }
  return res;
}

void quasilinear_postprocess(const MarketInstance& instance, EquilibriumResult& result) {
  const std::size_t n = instance.buyers();
  result.delta.assign(n, 0.0);
  result.ql_utilities.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = result.utilities[i];
    if (result.beta[i] >= 1.0 - kAtOne) {
      result.delta[i] = std::max(0.0, instance.budget(i) - w);
    } else {
      result.ql_utilities[i] = (1.0 - result.beta[i]) * w;
    }
  }
}

nlohmann::json to_json(const EquilibriumResult& result, const MarketInstance& instance) {
  using nlohmann::json;
  const std::size_t n = instance.buyers();
  const std::size_t K = instance.segments();
  auto intervals = [](const std::vector<Interval>& ivs) {
    json out = json::array();
    for (const auto& iv : ivs) out.push_back({iv.lo, iv.hi});
    return out;
  };
  json alloc = json::array();
  for (const auto& ivs : result.allocation.intervals) alloc.push_back(intervals(ivs));
  json seg = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    seg.push_back(std::vector<double>(result.segment_utilities.begin() + i * K,
                                      result.segment_utilities.begin() + (i + 1) * K));
  }
  std::vector<double> u_star(n), raw_beta(n), raw_u(n), raw_budgets(n);
  for (std::size_t i = 0; i < n; ++i) {
    u_star[i] = instance.budget(i) / result.beta[i];
    raw_beta[i] = result.beta[i] * instance.budget_scale() / instance.value_scale(i);
    raw_u[i] = result.utilities[i] * instance.value_scale(i);
    raw_budgets[i] = instance.budget(i) * instance.budget_scale();
  }
  json prices = {{"breakpoints", result.prices.breakpoints}, {"owners", result.prices.owner}};
  json slopes = json::array();
  json intercepts = json::array();
  for (const auto& p : result.prices.pieces) {
    slopes.push_back(p.slope);
    intercepts.push_back(p.intercept);
  }
  prices["slopes"] = std::move(slopes);
  prices["intercepts"] = std::move(intercepts);

  json doc = {{"mode", to_string(result.mode)},
              {"beta", result.beta},
              {"u_star", u_star},
              {"utilities", result.utilities},
              {"segment_utilities", std::move(seg)},
              {"allocation", std::move(alloc)},
              {"leftover", intervals(result.allocation.leftover)},
              {"gap", result.gap},
              {"iterations", result.iterations},
              {"prices", std::move(prices)},
              {"raw", {{"budgets", raw_budgets}, {"beta", raw_beta}, {"utilities", raw_u}}}};
  if (result.mode == Mode::Quasilinear) {
    std::vector<double> raw_delta(n), raw_ql(n);
    for (std::size_t i = 0; i < n; ++i) {
      raw_delta[i] = result.delta[i] * instance.budget_scale();
      raw_ql[i] = result.ql_utilities[i] * instance.budget_scale();
    }
    doc["delta"] = result.delta;
    doc["ql_utilities"] = result.ql_utilities;
    doc["raw"]["delta"] = raw_delta;
    doc["raw"]["ql_utilities"] = raw_ql;
  }
  return doc;
}

EquilibriumResult result_from_allocation(const MarketInstance& instance,
                                         std::span<const double> beta, PureAllocation allocation) {
  EquilibriumResult res;
  res.mode = instance.mode();
  res.beta.assign(beta.begin(), beta.end());
  res.allocation = std::move(allocation);
  res.prices = upper_envelope(instance, res.beta);
  res.utilities = allocation_values(instance, res.allocation);
  res.segment_utilities = realised_segment_utilities(instance, res.allocation);
  res.gap = duality_gap(instance, res.beta, res.utilities);
  if (instance.mode() == Mode::Quasilinear) quasilinear_postprocess(instance, res);
  return res;
}

EquilibriumResult result_from_json(const nlohmann::json& document, const MarketInstance& instance) {
  const std::size_t n = instance.buyers();
  try {
    EquilibriumResult res;
    res.mode = instance.mode();
    res.beta = document.at("beta").get<std::vector<double>>();
    if (res.beta.size() != n) throw ValidationError("result beta must have one entry per buyer");
    const auto& alloc = document.at("allocation");
    if (!alloc.is_array() || alloc.size() != n) {
      throw ValidationError("result allocation must have one list per buyer");
    }
    res.allocation.intervals.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& iv : alloc.at(i)) {
        res.allocation.intervals[i].push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
      }
    }
    if (document.contains("leftover")) {
      for (const auto& iv : document.at("leftover")) {
        res.allocation.leftover.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
      }
    }
    EquilibriumResult out = result_from_allocation(instance, res.beta, std::move(res.allocation));
    out.iterations = document.value("iterations", std::size_t{0});
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed result document: ") + e.what());
  }
}

}  // namespace fisherfair
