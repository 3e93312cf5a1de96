// Command-line front end. Exit codes: 0 certified / passed, 1 input error,
// 2 not converged / verification failed.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fisherfair/envelope.hpp"
#include "fisherfair/errors.hpp"
#include "fisherfair/feasible_utilities.hpp"
#include "fisherfair/market_model.hpp"
#include "fisherfair/parallel.hpp"
#include "fisherfair/solver_dual.hpp"
#include "fisherfair/solver_ellipsoid.hpp"
#include "fisherfair/solver_sda.hpp"
#include "fisherfair/verification.hpp"

using namespace fisherfair;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 1;
constexpr int kNotConverged = 2;

// Writes to the file, or stdout for "" / "-".
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + path + ": " + e.what());
  }
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw ValidationError("not a nonnegative integer list: " + text);
    }
  }
  return out;
}

struct SolveArgs {
  std::string instance;
  std::string mode = "auto";
  std::string out;
  double gap_tol = 1e-8;
  std::string schedule = "newton";
  std::size_t max_iter = 0;
  double epsilon = 1e-4;
  std::size_t iterations = 100000;
  std::uint64_t seed = 0;
};

int run_solve(const SolveArgs& a) {
  const MarketInstance inst = load_instance_file(a.instance);
  if (a.mode == "auto" || a.mode == "dual") {
    DualConfig cfg;
    cfg.gap_tol = a.gap_tol;
    cfg.schedule = parse_step_schedule(a.schedule);
    cfg.max_iter = a.max_iter;
    try {
      emit(a.out, to_json(solve(inst, cfg), inst).dump(2) + "\n");
      return kOk;
    } catch (const NotConverged<EquilibriumResult>& e) {
      emit(a.out, to_json(e.best(), inst).dump(2) + "\n");
      std::cerr << e.what() << " (gap " << e.gap() << ")\n";
      return kNotConverged;
    }
  }
  if (a.mode == "ellipsoid") {
    EllipsoidConfig cfg;
    cfg.epsilon = a.epsilon;
    cfg.max_iter = a.max_iter;
    const EllipsoidResult e = ellipsoid_solve(inst, cfg);
    emit(a.out, to_json(to_equilibrium(inst, e), inst).dump(2) + "\n");
    if (!e.certified) std::cerr << "ellipsoid stopped at the iteration cap without a certificate\n";
    return e.certified ? kOk : kNotConverged;
  }
  if (a.mode == "sda") {
    const SdaTrace trace = sda_run(inst, a.iterations, a.seed);
    const EquilibriumResult r = equilibrium_at(inst, trace.final_average());
    emit(a.out, to_json(r, inst).dump(2) + "\n");
    if (r.gap > a.gap_tol) {
      std::cerr << "averaged SDA prices have gap " << r.gap << " above " << a.gap_tol << "\n";
      return kNotConverged;
    }
    return kOk;
  }
  throw ValidationError("unknown mode " + a.mode + " (expected auto, dual, sda or ellipsoid)");
}

int run_verify(const std::string& instance_path, const std::string& result_path, double tol,
               const std::string& out) {
  const MarketInstance inst = load_instance_file(instance_path);
  const EquilibriumResult r = result_from_json(read_json(result_path), inst);
  const KktReport kkt = check_equilibrium(inst, r.allocation, r.beta, tol);
  const FairnessReport fair = fairness(inst, r.allocation, tol);
  const json doc = {{"kkt", to_json(kkt)}, {"fairness", to_json(fair)}};
  emit(out, doc.dump(2) + "\n");
  return kkt.pass ? kOk : kNotConverged;
}

std::vector<double> reference_beta(const MarketInstance& inst, const std::string& result_path) {
  if (!result_path.empty()) return result_from_json(read_json(result_path), inst).beta;
  return solve(inst).beta;
}

int run_sda(const std::string& instance_path, std::size_t T, std::uint64_t seed,
            std::size_t replications, const std::string& reference, bool no_reference,
            const std::string& out, const std::string& mse_out) {
  const MarketInstance inst = load_instance_file(instance_path);
  std::vector<double> ref;
  if (!no_reference) ref = reference_beta(inst, reference);
  std::ostringstream csv;
  if (no_reference) {
    write_trace_csv(csv, sda_run(inst, T, seed));
  } else {
    write_trace_csv(csv, sda_run(inst, T, seed, ref));
  }
  emit(out, csv.str());
  if (replications > 0 && !no_reference) {
    const MseCurve curve = mse_curve(inst, T, replications, seed, ref, Execution::Parallel);
    std::ostringstream m;
    m.precision(17);
    m << "t,mse,envelope\n";
    for (std::size_t c = 0; c < curve.t.size(); ++c) {
      m << curve.t[c] << ',' << curve.mse[c] << ',' << curve.envelope[c] << '\n';
    }
    emit(mse_out, m.str());
  }
  return kOk;
}

int run_ellipsoid(const std::string& instance_path, double epsilon, std::size_t max_iter,
                  const std::string& out, const std::string& log_path) {
  const MarketInstance inst = load_instance_file(instance_path);
  EllipsoidConfig cfg;
  cfg.epsilon = epsilon;
  cfg.max_iter = max_iter;
  cfg.record_log = !log_path.empty();
  const EllipsoidResult e = ellipsoid_solve(inst, cfg);
  json doc = to_json(to_equilibrium(inst, e), inst);
  doc["ellipsoid"] = {{"segment_utilities", e.segment_utilities},
                      {"internal_eps", e.internal_eps},
                      {"objective_tol", e.objective_tol},
                      {"objective", e.objective},
                      {"lower_bound", e.lower_bound},
                      {"certified", e.certified},
                      {"dim", e.dim},
                      {"iterations", e.iterations},
                      {"separation_calls", e.separation_calls},
                      {"objective_calls", e.objective_calls},
                      {"call_bound", e.call_bound},
                      {"restarts", e.restarts},
                      {"rescued_segments", e.rescued_segments}};
  emit(out, doc.dump(2) + "\n");
  if (!log_path.empty()) {
    std::ostringstream csv;
    write_log_csv(csv, e);
    emit(log_path, csv.str());
  }
  return e.certified ? kOk : kNotConverged;
}

int run_oracle(const std::string& instance_path, std::size_t cells, std::size_t max_rounds,
               double gap_tol, const std::string& out) {
  const MarketInstance inst = load_instance_file(instance_path);
  OracleConfig cfg;
  cfg.max_rounds = max_rounds;
  cfg.gap_tol = gap_tol;
  cfg.exec = Execution::Parallel;
  auto write = [&](const OracleResult& r) {
    const json doc = {{"cells", cells},      {"beta", r.beta}, {"utilities", r.utilities},
                      {"gap", r.gap},        {"rounds", r.rounds}};
    emit(out, doc.dump(2) + "\n");
  };
  try {
    write(discretized_oracle(inst, cells, cfg));
    return kOk;
  } catch (const NotConverged<OracleResult>& e) {
    write(e.best());
    std::cerr << e.what() << " (gap " << e.gap() << ")\n";
    return kNotConverged;
  }
}

// theta, price, owner, beta_i v_i for every buyer. Every envelope piece
// contributes both endpoints so jumps at grid points show up.
int run_plot_data(const std::string& instance_path, const std::string& result_path,
                  std::size_t points, const std::string& out) {
  const MarketInstance inst = load_instance_file(instance_path);
  const std::vector<double> beta = reference_beta(inst, result_path);
  const PiecewiseLinearFunction p = upper_envelope(inst, beta);
  const std::size_t n = inst.buyers();

  struct Sample {
    double theta;
    std::size_t piece;
  };
  std::vector<Sample> samples;
  for (std::size_t m = 0; m < p.size(); ++m) {
    samples.push_back({p.breakpoints[m], m});
    samples.push_back({p.breakpoints[m + 1], m});
  }
  for (std::size_t s = 0; s < points; ++s) {
    const double theta = points == 1 ? 0.0 : static_cast<double>(s) / static_cast<double>(points - 1);
    samples.push_back({theta, p.piece_of(theta)});
  }
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) {
    return a.theta < b.theta || (a.theta == b.theta && a.piece < b.piece);
  });

  std::ostringstream csv;
  csv.precision(17);
  csv << "theta,price,owner";
  for (std::size_t i = 1; i <= n; ++i) csv << ",scaled_value_" << i;
  csv << '\n';
  for (const Sample& s : samples) {
    const std::size_t k = p.segment[s.piece];
    csv << s.theta << ',' << p.pieces[s.piece](s.theta) << ',' << p.owner[s.piece] + 1;
    for (std::size_t i = 0; i < n; ++i) csv << ',' << beta[i] * inst.piece(i, k)(s.theta);
    csv << '\n';
  }
  emit(out, csv.str());
  return kOk;
}

struct Stats {
  double mean = 0.0;
  double stderr_ = 0.0;
};

Stats summarize(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    var /= static_cast<double>(xs.size() - 1);
    s.stderr_ = std::sqrt(var / static_cast<double>(xs.size()));
  }
  return s;
}

int run_bench(const std::vector<std::string>& grid, const std::string& seeds_text, double gap_tol,
              const std::string& out) {
  std::vector<std::size_t> ns;
  std::vector<std::size_t> ks;
  if (grid.size() == 2) {
    ns = parse_list(grid[0]);
    ks = parse_list(grid[1]);
  } else if (!grid.empty()) {
    throw ValidationError("--grid takes two comma lists: n values and K values");
  }
  const std::vector<std::size_t> seeds = parse_list(seeds_text);

  struct Cell {
    std::size_t n, k, seed;
    double build = 0.0, solve = 0.0, gap = 0.0;
    bool ok = false;
  };
  std::vector<Cell> cells;
  for (std::size_t n : ns) {
    for (std::size_t k : ks) {
      for (std::size_t seed : seeds) cells.push_back({n, k, seed});
    }
  }

  using clock = std::chrono::steady_clock;
  const auto count = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap())
  for (std::ptrdiff_t c = 0; c < count; ++c) {
    Cell& cell = cells[c];
    const auto t0 = clock::now();
    const MarketInstance inst = load_instance(sample_instance(cell.n, cell.k, cell.seed));
    const auto t1 = clock::now();
    DualConfig cfg;
    cfg.gap_tol = gap_tol;
    try {
      cell.gap = solve(inst, cfg).gap;
      cell.ok = true;
    } catch (const NotConverged<EquilibriumResult>& e) {
      cell.gap = e.gap();
    }
    const auto t2 = clock::now();
    cell.build = std::chrono::duration<double>(t1 - t0).count();
    cell.solve = std::chrono::duration<double>(t2 - t1).count();
  }

  std::ostringstream csv;
  csv << "n,k,samples,build_mean,build_stderr,solve_mean,solve_stderr,total_mean,total_stderr,"
         "max_gap,all_certified\n";
  bool all_ok = true;
  for (std::size_t n : ns) {
    for (std::size_t k : ks) {
      std::vector<double> build, solve_t, total;
      double max_gap = 0.0;
      bool ok = true;
      for (const Cell& cell : cells) {
        if (cell.n != n || cell.k != k) continue;
        build.push_back(cell.build);
        solve_t.push_back(cell.solve);
        total.push_back(cell.build + cell.solve);
        max_gap = std::max(max_gap, cell.gap);
        ok = ok && cell.ok;
      }
      all_ok = all_ok && ok;
      const Stats b = summarize(build);
      const Stats s = summarize(solve_t);
      const Stats t = summarize(total);
      csv << n << ',' << k << ',' << build.size() << ',' << b.mean << ',' << b.stderr_ << ','
          << s.mean << ',' << s.stderr_ << ',' << t.mean << ',' << t.stderr_ << ',' << max_gap << ','
          << (ok ? "true" : "false") << '\n';
    }
  }
  emit(out, csv.str());
  return all_ok ? kOk : kNotConverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair division of [0, 1] by Fisher market equilibrium with piecewise-linear valuations"};
  app.require_subcommand(1);
  int code = kOk;

  SolveArgs sa;
  auto* solve_cmd = app.add_subcommand("solve", "Compute an equilibrium and write the result JSON");
  solve_cmd->add_option("--instance", sa.instance, "Instance JSON")->required();
  solve_cmd->add_option("--mode", sa.mode, "auto | dual | sda | ellipsoid")->capture_default_str();
  solve_cmd->add_option("--out", sa.out, "Result path (stdout if omitted)");
  solve_cmd->add_option("--gap-tol", sa.gap_tol, "Duality gap accepted as certified")->capture_default_str();
  solve_cmd->add_option("--schedule", sa.schedule, "Dual step rule: newton | sqrt_decay | polyak")
      ->capture_default_str();
  solve_cmd->add_option("--max-iter", sa.max_iter, "Iteration cap (0 = solver default)")->capture_default_str();
  solve_cmd->add_option("--epsilon", sa.epsilon, "Ellipsoid accuracy")->capture_default_str();
  solve_cmd->add_option("--iterations", sa.iterations, "SDA iterations")->capture_default_str();
  solve_cmd->add_option("--seed", sa.seed, "SDA seed")->capture_default_str();
  solve_cmd->callback([&] { code = run_solve(sa); });

  std::string v_instance, v_result, v_out;
  double v_tol = kkt_tol;
  auto* verify_cmd = app.add_subcommand("verify", "Check KKT conditions and fairness of a result");
  verify_cmd->add_option("--instance", v_instance, "Instance JSON")->required();
  verify_cmd->add_option("--result", v_result, "Result JSON from solve")->required();
  verify_cmd->add_option("--tol", v_tol, "Residual tolerance")->capture_default_str();
  verify_cmd->add_option("--out", v_out, "Report path (stdout if omitted)");
  verify_cmd->callback([&] { code = run_verify(v_instance, v_result, v_tol, v_out); });

  std::string c_instance, c_out;
  auto* conic_cmd = app.add_subcommand("emit-conic", "Write the conic program for an external solver");
  conic_cmd->add_option("--instance", c_instance, "Instance JSON")->required();
  conic_cmd->add_option("--out", c_out, "Output path (stdout if omitted)");
  conic_cmd->callback([&] {
    emit(c_out, to_json(emit_conic_program(load_instance_file(c_instance))).dump(2) + "\n");
  });

  std::string s_instance, s_reference, s_out, s_mse;
  std::size_t s_T = 100000;
  std::size_t s_reps = 0;
  std::uint64_t s_seed = 0;
  bool s_noref = false;
  auto* sda_cmd = app.add_subcommand("sda", "Run stochastic dual averaging and write its trace CSV");
  sda_cmd->add_option("--instance", s_instance, "Instance JSON")->required();
  sda_cmd->add_option("--iterations", s_T, "Iterations T")->capture_default_str();
  sda_cmd->add_option("--seed", s_seed, "Seed (replication r uses seed + r)")->capture_default_str();
  sda_cmd->add_option("--reference", s_reference, "Result JSON with reference prices (default: dual solve)");
  sda_cmd->add_flag("--no-reference", s_noref, "Skip the reference and the sqerr column");
  sda_cmd->add_option("--replications", s_reps, "Also write an MSE curve over this many runs")
      ->capture_default_str();
  sda_cmd->add_option("--out", s_out, "Trace CSV (stdout if omitted)");
  sda_cmd->add_option("--mse-out", s_mse, "MSE curve CSV (stdout if omitted)");
  sda_cmd->callback(
      [&] { code = run_sda(s_instance, s_T, s_seed, s_reps, s_reference, s_noref, s_out, s_mse); });

  std::string e_instance, e_out, e_log;
  double e_eps = 1e-4;
  std::size_t e_max = 0;
  auto* ell_cmd = app.add_subcommand("ellipsoid", "Run the ellipsoid method and write result plus diagnostics");
  ell_cmd->add_option("--instance", e_instance, "Instance JSON")->required();
  ell_cmd->add_option("--epsilon", e_eps, "Target accuracy in (0, 1)")->capture_default_str();
  ell_cmd->add_option("--max-iter", e_max, "Iteration cap (0 = derived from the complexity bound)")
      ->capture_default_str();
  ell_cmd->add_option("--out", e_out, "Result path (stdout if omitted)");
  ell_cmd->add_option("--log", e_log, "Per-iteration CSV");
  ell_cmd->callback([&] { code = run_ellipsoid(e_instance, e_eps, e_max, e_out, e_log); });

  std::string o_instance, o_out;
  std::size_t o_cells = 2000;
  std::size_t o_rounds = OracleConfig{}.max_rounds;
  double o_gap = OracleConfig{}.gap_tol;
  auto* oracle_cmd = app.add_subcommand("oracle", "Proportional response on the discretized market");
  oracle_cmd->add_option("--instance", o_instance, "Instance JSON")->required();
  oracle_cmd->add_option("--cells", o_cells, "Number of equal cells m")->capture_default_str();
  oracle_cmd->add_option("--max-rounds", o_rounds, "Round cap")->capture_default_str();
  oracle_cmd->add_option("--gap-tol", o_gap, "Stop at this discrete duality gap")->capture_default_str();
  oracle_cmd->add_option("--out", o_out, "Output path (stdout if omitted)");
  oracle_cmd->callback([&] { code = run_oracle(o_instance, o_cells, o_rounds, o_gap, o_out); });

  std::size_t g_n = 4, g_k = 3;
  std::uint64_t g_seed = 0;
  std::string g_mode = "linear", g_out;
  auto* sample_cmd = app.add_subcommand("sample-instance", "Generate a random instance");
  sample_cmd->add_option("--n", g_n, "Buyers")->capture_default_str()->check(CLI::PositiveNumber);
  sample_cmd->add_option("--k", g_k, "Segments")->capture_default_str()->check(CLI::PositiveNumber);
  sample_cmd->add_option("--seed", g_seed, "Seed")->capture_default_str();
  sample_cmd->add_option("--mode", g_mode, "linear | quasilinear")->capture_default_str();
  sample_cmd->add_option("--out", g_out, "Output path (stdout if omitted)");
  sample_cmd->callback([&] {
    Mode mode;
    if (g_mode == "linear") {
      mode = Mode::Linear;
    } else if (g_mode == "quasilinear") {
      mode = Mode::Quasilinear;
    } else {
      throw ValidationError("unknown mode " + g_mode);
    }
    emit(g_out, sample_instance(g_n, g_k, g_seed, mode).dump(2) + "\n");
  });

  std::string p_instance, p_result, p_out;
  std::size_t p_points = 1000;
  auto* plot_cmd = app.add_subcommand("plot-data", "Sample the price envelope and scaled valuations");
  plot_cmd->add_option("--instance", p_instance, "Instance JSON")->required();
  plot_cmd->add_option("--result", p_result, "Result JSON (default: dual solve)");
  plot_cmd->add_option("--points", p_points, "Uniform samples besides piece endpoints")->capture_default_str();
  plot_cmd->add_option("--out", p_out, "CSV path (stdout if omitted)");
  plot_cmd->callback([&] { code = run_plot_data(p_instance, p_result, p_points, p_out); });

  std::vector<std::string> b_grid;
  std::string b_seeds = "0,1,2,3,4,5,6,7", b_out;
  double b_gap = 1e-6;
  auto* bench_cmd = app.add_subcommand(
      "bench", "Time dual solves over an (n, K) grid; FISHER_FAIR_THREADS caps parallel cells");
  bench_cmd->add_option("--grid", b_grid, "Two comma lists: n values, then K values")->expected(2);
  bench_cmd->add_option("--seeds", b_seeds, "Comma list of seeds")->capture_default_str();
  bench_cmd->add_option("--gap-tol", b_gap, "Gap each solve must certify")->capture_default_str();
  bench_cmd->add_option("--out", b_out, "CSV path (stdout if omitted)");
  bench_cmd->callback([&] { code = run_bench(b_grid, b_seeds, b_gap, b_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const InfeasibleUtilities& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const NumericalBreakdown& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNotConverged;
  } catch (const NotConverged<EquilibriumResult>& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNotConverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return code;
}
