#include "fisherfair/solver_sda.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fisherfair/envelope.hpp"
#include "fisherfair/random.hpp"

namespace fisherfair {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

SdaTrace sda_run(const MarketInstance& inst, std::size_t T, std::uint64_t seed,
                 std::optional<std::span<const double>> reference) {
  const std::size_t n = inst.buyers();
  const PriceBox box = price_box(inst);
  std::mt19937_64 rng(seed);

  SdaTrace trace;
  trace.seed = seed;
  std::vector<double> beta = box.upper;
  std::vector<double> gbar(n, 0.0);
  std::vector<double> avg(n, 0.0);
  std::size_t next_checkpoint = 1;

  for (std::size_t t = 1; t <= T; ++t) {
    for (std::size_t i = 0; i < n; ++i) avg[i] += (beta[i] - avg[i]) / static_cast<double>(t);

    if (t == next_checkpoint || t == T) {
      trace.t.push_back(t);
      trace.beta.push_back(beta);
      trace.beta_avg.push_back(avg);
      if (reference) trace.sqerr.push_back(squared_distance(avg, *reference));
      if (t == next_checkpoint) next_checkpoint *= 2;
    }

    const double theta = unit_uniform(rng);
    std::size_t winner = 0;
    double best = -1.0;
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = inst.value_at(i, theta);
      if (beta[i] * v > best) {
        best = beta[i] * v;
        winner = i;
        value = v;
      }
    }
    const double w = 1.0 / static_cast<double>(t);
    for (std::size_t i = 0; i < n; ++i) gbar[i] *= 1.0 - w;
    gbar[winner] += w * value;
    for (std::size_t i = 0; i < n; ++i) {
      beta[i] = gbar[i] > 0.0 ? std::clamp(inst.budget(i) / gbar[i], box.lower[i], box.upper[i])
                              : box.upper[i];
    }
  }
  return trace;
}

void write_trace_csv(std::ostream& out, const SdaTrace& trace) {
  const std::size_t n = trace.beta.empty() ? 0 : trace.beta.front().size();
  out << "t";
  for (std::size_t i = 1; i <= n; ++i) out << ",beta_" << i;
  for (std::size_t i = 1; i <= n; ++i) out << ",betaavg_" << i;
  if (!trace.sqerr.empty()) out << ",sqerr";
  out << '\n';
  out.precision(17);
  for (std::size_t c = 0; c < trace.t.size(); ++c) {
    out << trace.t[c];
    for (double b : trace.beta[c]) out << ',' << b;
    for (double b : trace.beta_avg[c]) out << ',' << b;
    if (!trace.sqerr.empty()) out << ',' << trace.sqerr[c];
    out << '\n';
  }
}

double value_bound(const MarketInstance& inst) {
  double g = 0.0;
  for (std::size_t i = 0; i < inst.buyers(); ++i) {
    for (std::size_t k = 0; k < inst.segments(); ++k) {
      const Interval seg = inst.segment(k);
      const LinearPiece& p = inst.piece(i, k);
      g = std::max({g, p(seg.lo), p(seg.hi)});
    }
  }
  return g;
}

double mse_envelope(const MarketInstance& inst, double t) {
  const auto b = inst.budgets();
  const double sigma = *std::min_element(b.begin(), b.end());
  const double g = value_bound(inst);
  const double lt = std::log(t);
  return (6.0 * (1.0 + lt) + 0.5 * lt * lt) / t * g * g / (sigma * sigma);
}

MseCurve mse_curve(const MarketInstance& inst, std::size_t T, std::size_t replications,
                   std::uint64_t seed, std::span<const double> reference, Execution exec) {
  std::vector<SdaTrace> runs(replications);
  const auto R = static_cast<std::ptrdiff_t>(replications);
  if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap())
    for (std::ptrdiff_t r = 0; r < R; ++r) {
      runs[r] = sda_run(inst, T, seed + static_cast<std::uint64_t>(r), reference);
    }
  } else {
    for (std::ptrdiff_t r = 0; r < R; ++r) {
      runs[r] = sda_run(inst, T, seed + static_cast<std::uint64_t>(r), reference);
    }
  }

  MseCurve curve;
  if (runs.empty()) return curve;
  curve.t = runs.front().t;
  curve.mse.assign(curve.t.size(), 0.0);
  for (const auto& run : runs) {
    for (std::size_t c = 0; c < curve.t.size(); ++c) curve.mse[c] += run.sqerr[c];
    curve.final_error.push_back(std::sqrt(run.sqerr.back()));
  }
  for (std::size_t c = 0; c < curve.t.size(); ++c) {
    curve.mse[c] /= static_cast<double>(runs.size());
    curve.envelope.push_back(mse_envelope(inst, static_cast<double>(curve.t[c])));
  }
  return curve;
}

}  // namespace fisherfair
