#include "fisherfair/verification.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fisherfair/envelope.hpp"
#include "fisherfair/errors.hpp"

namespace fisherfair {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Losing bids decay geometrically; flushing them avoids subnormal arithmetic.
constexpr double kTinyBid = 1e-200;

// Integral of the envelope over [a, b], and the largest |p - beta_i v_i| there.
struct Overlap {
  double mass = 0.0;
  double slack = 0.0;
};

Overlap against_envelope(const MarketInstance& inst, const PiecewiseLinearFunction& p,
                         std::size_t buyer, double beta, Interval iv) {
  Overlap out;
  if (iv.empty()) return out;
  std::size_t m = p.piece_of(iv.lo);
  for (; m < p.size(); ++m) {
    const Interval span = p.span(m);
    if (span.lo >= iv.hi) break;
    const double a = std::max(span.lo, iv.lo);
    const double b = std::min(span.hi, iv.hi);
    if (b <= a) continue;
    const LinearPiece& env = p.pieces[m];
    const LinearPiece& own = inst.piece(buyer, p.segment[m]);
    out.mass += eval_interval(env, {a, b});
    out.slack = std::max({out.slack, std::abs(env(a) - beta * own(a)), std::abs(env(b) - beta * own(b))});
  }
  return out;
}

double price_mass(const PiecewiseLinearFunction& p, Interval iv) {
  double mass = 0.0;
  for (std::size_t m = 0; m < p.size(); ++m) {
    const Interval span = p.span(m);
    const double a = std::max(span.lo, iv.lo);
    const double b = std::min(span.hi, iv.hi);
    if (b > a) mass += eval_interval(p.pieces[m], {a, b});
  }
  return mass;
}

double safe_gap(const MarketInstance& inst, std::span<const double> beta,
                std::span<const double> values) {
  try {
    const double gap = duality_gap(inst, beta, values);
    return std::isnan(gap) ? kInf : gap;
  } catch (const DomainError&) {
    return kInf;
  }
}

FairnessReport report_from_values(const MarketInstance& inst,
                                  const std::vector<std::vector<double>>& value, double tol) {
  const std::size_t n = inst.buyers();
  const auto budgets = inst.budgets();
  const double total = std::accumulate(budgets.begin(), budgets.end(), 0.0);
  FairnessReport r;
  r.tol = tol;
  r.envy.assign(n, std::vector<double>(n, 0.0));
  r.ceei = std::all_of(budgets.begin(), budgets.end(),
                       [&](double b) { return std::abs(b - budgets[0]) <= 1e-12; });
  r.min_proportionality = kInf;
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = value[i][i];
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      r.envy[i][j] = value[i][j] / budgets[j] - value[i][i] / budgets[i];
      r.max_envy = std::max(r.max_envy, r.envy[i][j]);
    }
    r.proportionality.push_back(u[i] - budgets[i] / total * inst.total_value(i));
    r.min_proportionality = std::min(r.min_proportionality, r.proportionality.back());
  }
  const PriceBox box = price_box(inst);
  std::vector<double> beta(n);
  for (std::size_t i = 0; i < n; ++i) {
    beta[i] = u[i] > 0.0 ? std::clamp(budgets[i] / u[i], box.lower[i], box.upper[i]) : box.upper[i];
  }
  r.pareto_gap = safe_gap(inst, beta, u);
  r.pass = r.max_envy <= tol && r.min_proportionality >= -tol;
  return r;
}

}  // namespace

double KktReport::max_residual() const {
  double worst = std::max({market_clear_residual, price_mass_residual, overlap, duality_gap});
  for (const auto* v : {&budget_residuals, &utility_price_residuals, &comp_slack_residuals,
                        &ql_delta_residuals}) {
    for (double x : *v) worst = std::max(worst, x);
  }
  return worst;
}

KktReport check_equilibrium(const MarketInstance& inst, const PureAllocation& alloc,
                            std::span<const double> beta, double tol) {
  const std::size_t n = inst.buyers();
  if (beta.size() != n || alloc.intervals.size() != n) {
    throw ValidationError("allocation and prices must have one entry per buyer");
  }
  KktReport r;
  r.tol = tol;
  const bool positive = std::all_of(beta.begin(), beta.end(), [](double b) { return b > 0.0; });
  if (!positive) {
    r.market_clear_residual = kInf;
    r.duality_gap = kInf;
    r.pass = false;
    return r;
  }
  const bool ql = inst.mode() == Mode::Quasilinear;
  const PiecewiseLinearFunction p = upper_envelope(inst, beta);

  std::vector<Interval> all;
  std::vector<double> spend(n, 0.0);
  std::vector<double> values(n, 0.0);
  r.comp_slack_residuals.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (const Interval& raw : alloc.intervals[i]) {
      const Interval iv{std::max(raw.lo, 0.0), std::min(raw.hi, 1.0)};
      if (iv.empty()) continue;
      all.push_back(iv);
      const Overlap o = against_envelope(inst, p, i, beta[i], iv);
      spend[i] += o.mass;
      r.comp_slack_residuals[i] = std::max(r.comp_slack_residuals[i], o.slack);
      values[i] += inst.value(i, iv);
    }
  }

  // Uncovered parts carry the market-clearing residual; double coverage is overlap.
  std::sort(all.begin(), all.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
  double reach = 0.0;
  for (const Interval& iv : all) {
    if (iv.lo > reach) r.market_clear_residual += price_mass(p, {reach, iv.lo});
    r.overlap += std::max(0.0, std::min(reach, iv.hi) - iv.lo);
    reach = std::max(reach, iv.hi);
  }
  if (reach < 1.0) r.market_clear_residual += price_mass(p, {reach, 1.0});

  double delta_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double delta = ql ? std::max(0.0, inst.budget(i) - spend[i]) : 0.0;
    delta_total += delta;
    r.budget_residuals.push_back(std::abs(spend[i] + delta - inst.budget(i)));
    r.utility_price_residuals.push_back(std::abs(values[i] + delta - inst.budget(i) / beta[i]));
    if (ql) r.ql_delta_residuals.push_back(std::abs(delta * (1.0 - beta[i])));
  }
  const auto budgets = inst.budgets();
  const double total = std::accumulate(budgets.begin(), budgets.end(), 0.0);
  r.price_mass_residual = std::abs(integral(p) - (total - delta_total));
  r.duality_gap = safe_gap(inst, beta, values);
  r.pass = r.max_residual() <= tol;
  return r;
}

FairnessReport fairness(const MarketInstance& inst, const PureAllocation& alloc, double tol) {
  const std::size_t n = inst.buyers();
  if (alloc.intervals.size() != n) throw ValidationError("allocation must have one list per buyer");
  std::vector<std::vector<double>> value(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (const Interval& iv : alloc.intervals[j]) {
      for (std::size_t i = 0; i < n; ++i) value[i][j] += inst.value(i, iv);
    }
  }
  return report_from_values(inst, value, tol);
}

FairnessReport proportional_share_fairness(const MarketInstance& inst, double tol) {
  const std::size_t n = inst.buyers();
  const auto budgets = inst.budgets();
  const double total = std::accumulate(budgets.begin(), budgets.end(), 0.0);
  std::vector<std::vector<double>> value(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) value[i][j] = budgets[j] / total * inst.total_value(i);
  }
  return report_from_values(inst, value, tol);
}

std::vector<double> cell_values(const MarketInstance& inst, std::size_t m) {
  const std::size_t n = inst.buyers();
  std::vector<double> v(m * n);
  for (std::size_t j = 0; j < m; ++j) {
    const Interval cell{static_cast<double>(j) / static_cast<double>(m),
                        static_cast<double>(j + 1) / static_cast<double>(m)};
    for (std::size_t i = 0; i < n; ++i) v[j * n + i] = inst.value(i, cell);
  }
  return v;
}

namespace {

// One proportional-response round. bids and values are laid out j * n + i.
void response_round_serial(std::span<const double> v, std::span<double> bids,
                           std::span<const double> budgets, bool ql, std::vector<double>& u) {
  const std::size_t n = budgets.size();
  const std::size_t m = v.size() / n;
  std::fill(u.begin(), u.end(), 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    double price = 0.0;
    for (std::size_t i = 0; i < n; ++i) price += bids[j * n + i];
    for (std::size_t i = 0; i < n; ++i) {
      const double x = price > 0.0 ? bids[j * n + i] / price : 0.0;
      bids[j * n + i] = x;  // bids now hold shares until the update below
      u[i] += v[j * n + i] * x;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const double denom = ql ? std::max(u[i], budgets[i]) : u[i];
      const double b = denom > 0.0 ? budgets[i] * v[j * n + i] * bids[j * n + i] / denom : 0.0;
      bids[j * n + i] = b < kTinyBid ? 0.0 : b;
    }
  }
}

void response_round_parallel(std::span<const double> v, std::span<double> bids,
                             std::span<const double> budgets, bool ql, std::vector<double>& u) {
  const auto n = static_cast<std::ptrdiff_t>(budgets.size());
  const auto m = static_cast<std::ptrdiff_t>(v.size()) / n;
  std::fill(u.begin(), u.end(), 0.0);
  double* up = u.data();
#pragma omp parallel num_threads(thread_cap())
  {
#pragma omp for reduction(+ : up[:n])
    for (std::ptrdiff_t j = 0; j < m; ++j) {
      double price = 0.0;
      for (std::ptrdiff_t i = 0; i < n; ++i) price += bids[j * n + i];
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        const double x = price > 0.0 ? bids[j * n + i] / price : 0.0;
        bids[j * n + i] = x;
        up[i] += v[j * n + i] * x;
      }
    }
#pragma omp for
    for (std::ptrdiff_t j = 0; j < m; ++j) {
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        const double denom = ql ? std::max(up[i], budgets[i]) : up[i];
        const double b = denom > 0.0 ? budgets[i] * v[j * n + i] * bids[j * n + i] / denom : 0.0;
        bids[j * n + i] = b < kTinyBid ? 0.0 : b;
      }
    }
  }
}

}  // namespace

OracleResult discretized_oracle(const MarketInstance& inst, std::size_t m, const OracleConfig& cfg) {
  const std::size_t n = inst.buyers();
  if (m < 1) throw ValidationError("the oracle needs at least one cell");
  const bool ql = inst.mode() == Mode::Quasilinear;
  const auto v = cell_values(inst, m);
  const auto budgets = inst.budgets();
  const double C = dual_constant(inst);

  std::vector<double> bids(m * n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) bids[j * n + i] = budgets[i] / static_cast<double>(m);
  }
  std::vector<double> u(n, 0.0);
  OracleResult best;
  best.gap = kInf;

  auto certify = [&](std::size_t round) {
    OracleResult cur;
    cur.rounds = round;
    cur.utilities = u;
    cur.beta.resize(n);
    double log_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double b = u[i] > 0.0 ? budgets[i] / u[i] : 1.0;
      cur.beta[i] = ql ? std::min(1.0, b) : b;
      log_sum += budgets[i] * std::log(cur.beta[i]);
    }
    double dual = -log_sum;
    for (std::size_t j = 0; j < m; ++j) {
      double top = 0.0;
      for (std::size_t i = 0; i < n; ++i) top = std::max(top, cur.beta[i] * v[j * n + i]);
      dual += top;
    }
    cur.gap = dual - primal_value(inst, u) - C;
    if (std::isnan(cur.gap)) cur.gap = kInf;
    if (cur.gap < best.gap) best = std::move(cur);
  };

  for (std::size_t round = 1; round <= cfg.max_rounds; ++round) {
    if (cfg.exec == Execution::Parallel) {
      response_round_parallel(v, bids, budgets, ql, u);
    } else {
      response_round_serial(v, bids, budgets, ql, u);
    }
    if (round % 10 == 0 || round == cfg.max_rounds || m == 1) {
      certify(round);
      if (best.gap <= cfg.gap_tol) return best;
    }
  }
  throw NotConverged<OracleResult>("proportional response hit the round cap", best, best.gap);
}

nlohmann::json to_json(const KktReport& r) {
  nlohmann::json j = {{"market_clear_residual", r.market_clear_residual},
                      {"price_mass_residual", r.price_mass_residual},
                      {"overlap", r.overlap},
                      {"budget_residuals", r.budget_residuals},
                      {"utility_price_residuals", r.utility_price_residuals},
                      {"comp_slack_residuals", r.comp_slack_residuals},
                      {"duality_gap", r.duality_gap},
                      {"tol", r.tol},
                      {"pass", r.pass}};
  if (!r.ql_delta_residuals.empty()) j["ql_delta_residuals"] = r.ql_delta_residuals;
  return j;
}

nlohmann::json to_json(const FairnessReport& r) {
  return {{"envy", r.envy},
          {"max_envy", r.max_envy},
          {"proportionality", r.proportionality},
          {"min_proportionality", r.min_proportionality},
          {"pareto_gap", r.pareto_gap},
          {"ceei", r.ceei},
          {"tol", r.tol},
          {"pass", r.pass}};
}

}  // namespace fisherfair
