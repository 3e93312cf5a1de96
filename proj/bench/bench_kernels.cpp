// Serial reference kernels against their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <vector>

#include "fisherfair/envelope.hpp"
#include "fisherfair/errors.hpp"
#include "fisherfair/solver_dual.hpp"
#include "fisherfair/solver_sda.hpp"
#include "fisherfair/verification.hpp"

using namespace fisherfair;

namespace {

Execution exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? Execution::Serial : Execution::Parallel;
}

void label(benchmark::State& state) { state.SetLabel(state.range(0) == 0 ? "serial" : "parallel"); }

void BM_UpperEnvelope(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  const MarketInstance inst = load_instance(sample_instance(n, k, 1));
  const std::vector<double> beta = price_box(inst).upper;
  for (auto _ : state) benchmark::DoNotOptimize(upper_envelope(inst, beta, exec_of(state)));
  label(state);
}
BENCHMARK(BM_UpperEnvelope)->ArgsProduct({{0, 1}, {50, 200}, {50, 400}});

void BM_ProportionalResponse(benchmark::State& state) {
  const MarketInstance inst = load_instance(sample_instance(10, 5, 2));
  OracleConfig cfg;
  cfg.exec = exec_of(state);
  cfg.max_rounds = 200;
  cfg.gap_tol = 0.0;
  const auto m = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) {
    try {
      discretized_oracle(inst, m, cfg);
    } catch (const NotConverged<OracleResult>& e) {
      benchmark::DoNotOptimize(e.gap());
    }
  }
  label(state);
}
BENCHMARK(BM_ProportionalResponse)->ArgsProduct({{0, 1}, {2000, 20000}})->Unit(benchmark::kMillisecond);

void BM_SdaReplications(benchmark::State& state) {
  const MarketInstance inst = load_instance(sample_instance(4, 3, 3));
  const std::vector<double> ref = solve(inst).beta;
  for (auto _ : state) {
    benchmark::DoNotOptimize(mse_curve(inst, 20000, 8, 0, ref, exec_of(state)));
  }
  label(state);
}
BENCHMARK(BM_SdaReplications)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
