#include "fisherfair/solver_ellipsoid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "fisherfair/errors.hpp"

namespace fisherfair {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RowBuilder {
  EllipsoidProblem& p;
  // sum coef * x[col] <= rhs + eps
  void add(std::vector<std::pair<std::size_t, double>> terms, double rhs) {
    LinearConstraint row;
    for (auto [c, v] : terms) {
      if (v == 0.0) continue;
      row.cols.push_back(c);
      row.vals.push_back(v);
    }
    row.rhs = rhs + p.eps;
    if (!row.cols.empty()) p.linear.push_back(std::move(row));
  }
};

std::size_t new_column(EllipsoidProblem& p, std::string name) {
  p.names.push_back(std::move(name));
  return p.dim++;
}

// Normalized value of [x, y] for the buyer at position j.
double hat_value(const NormalizedSegment& seg, std::size_t j, double x, double y) {
  const std::size_t a = seg.order[j];
  return seg.d_hat[a] * (y - x) + 0.5 * seg.c_hat[a] * (y * y - x * x);
}

double kappa(const MarketInstance& inst) {
  const auto b = inst.budgets();
  return 1.0 / *std::min_element(b.begin(), b.end());
}

}  // namespace

std::string to_string(CutKind kind) {
  switch (kind) {
    case CutKind::None:
      return "none";
    case CutKind::Linear:
      return "linear";
    case CutKind::Quadratic:
      return "quadratic";
    case CutKind::Objective:
      return "objective";
  }
  return "unknown";
}

EllipsoidProblem build_ellipsoid_problem(const MarketInstance& inst, double eps) {
  if (inst.mode() != Mode::Linear) {
    throw ValidationError("the ellipsoid solver handles linear-mode instances only");
  }
  if (!(eps > 0.0 && eps < 1.0)) throw ValidationError("ellipsoid epsilon must lie in (0, 1)");
  const std::size_t n = inst.buyers();
  const std::size_t K = inst.segments();

  EllipsoidProblem p;
  p.eps = eps;
  p.budgets.assign(inst.budgets().begin(), inst.budgets().end());
  for (std::size_t i = 0; i < n; ++i) p.u_col.push_back(new_column(p, "u[" + std::to_string(i + 1) + "]"));
  for (std::size_t k = 0; k < K; ++k) {
    p.segments.push_back(normalize_segment(inst, k));
    const auto& seg = p.segments.back();
    const std::size_t m = seg.order.size();
    const std::string tag = std::to_string(k + 1) + "," ;
    auto& uh = p.uhat_col.emplace_back();
    auto& sc = p.s_col.emplace_back();
    auto& tc = p.t_col.emplace_back();
    for (std::size_t j = 0; j < m; ++j) uh.push_back(new_column(p, "uhat[" + tag + std::to_string(j + 1) + "]"));
    for (std::size_t j = 0; j + 1 < m; ++j) {
      sc.push_back(new_column(p, "s[" + tag + std::to_string(j + 1) + "]"));
      tc.push_back(new_column(p, "t[" + tag + std::to_string(j + 1) + "]"));
    }
  }

  RowBuilder rows{p};
  // u_i <= sum_k lambda_ik u_hat_ik, and the box min(B_i, eps/2) <= u_i <= 1.
  // The lower bound is not enlarged so the objective stays finite.
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<std::size_t, double>> terms{{p.u_col[i], 1.0}};
    for (std::size_t k = 0; k < K; ++k) {
      const auto& seg = p.segments[k];
      for (std::size_t j = 0; j < seg.order.size(); ++j) {
        if (seg.order[j] == i) terms.push_back({p.uhat_col[k][j], -seg.lambda[i]});
      }
    }
    rows.add(terms, 0.0);
    rows.add({{p.u_col[i], 1.0}}, 1.0);
    LinearConstraint lower;
    lower.cols = {p.u_col[i]};
    lower.vals = {-1.0};
    lower.rhs = -std::min(inst.budget(i), 0.5 * eps);
    p.linear.push_back(lower);
  }

  for (std::size_t k = 0; k < K; ++k) {
    const auto& seg = p.segments[k];
    const auto& uh = p.uhat_col[k];
    const auto& sc = p.s_col[k];
    const auto& tc = p.t_col[k];
    const std::size_t m = seg.order.size();
    for (std::size_t j = 0; j < m; ++j) rows.add({{uh[j], -1.0}}, 0.0);
    if (m == 0) continue;
    if (m == 1) {
      rows.add({{uh[0], 1.0}}, 1.0);
      continue;
    }
    // z_j = g0 s + g1 t, w_j = g2 s + g3 t.
    auto z = [&](std::size_t j, double sign) {
      const auto g = seg.g_block(j);
      return std::vector<std::pair<std::size_t, double>>{{sc[j], sign * g[0]}, {tc[j], sign * g[1]}};
    };
    auto w = [&](std::size_t j, double sign) {
      const auto g = seg.g_block(j);
      return std::vector<std::pair<std::size_t, double>>{{sc[j], sign * g[2]}, {tc[j], sign * g[3]}};
    };
    auto join = [](std::vector<std::pair<std::size_t, double>> a,
                   const std::vector<std::pair<std::size_t, double>>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    rows.add(join({{uh[0], 1.0}}, z(0, -1.0)), 0.0);
    for (std::size_t j = 1; j + 1 < m; ++j) {
      rows.add(join(join({{uh[j], 1.0}}, z(j, -1.0)), w(j - 1, -1.0)), 0.0);
    }
    rows.add(join({{uh[m - 1], 1.0}}, w(m - 2, -1.0)), 1.0);
    for (std::size_t j = 0; j + 1 < m; ++j) {
      rows.add(z(j, -1.0), 0.0);              // z >= 0
      rows.add(z(j, 1.0), 1.0);               // z <= 1
      rows.add(w(j, -1.0), 1.0);              // w >= -1
      rows.add(w(j, 1.0), 0.0);               // w <= 0
      rows.add(join(z(j, -1.0), w(j, -1.0)), 0.0);  // z + w >= 0
      rows.add({{sc[j], -1.0}}, 0.0);
      rows.add({{sc[j], 1.0}}, 1.0);
      rows.add({{tc[j], 1.0}}, 1.0);
      p.parabolas.push_back({sc[j], tc[j], eps});
    }
  }
  return p;
}

Separation separation_oracle(const EllipsoidProblem& p, std::span<const double> x) {
  Separation out;
  double worst = 0.0;
  for (std::size_t r = 0; r < p.linear.size(); ++r) {
    const auto& row = p.linear[r];
    double lhs = 0.0;
    double norm2 = 0.0;
    for (std::size_t a = 0; a < row.cols.size(); ++a) {
      lhs += row.vals[a] * x[row.cols[a]];
      norm2 += row.vals[a] * row.vals[a];
    }
    const double depth = (lhs - row.rhs) / std::sqrt(norm2);
    if (depth > worst) {
      worst = depth;
      out.kind = CutKind::Linear;
      out.index = r;
    }
  }
  for (std::size_t q = 0; q < p.parabolas.size(); ++q) {
    const auto& par = p.parabolas[q];
    const double s = x[par.s];
    const double viol = s * s - x[par.t] - par.slack;
    if (viol <= 0.0) continue;
    const double depth = viol / std::sqrt(4.0 * s * s + 1.0);
    if (depth > worst) {
      worst = depth;
      out.kind = CutKind::Quadratic;
      out.index = q;
    }
  }
  if (out.kind == CutKind::None) return out;
  out.normal.assign(p.dim, 0.0);
  if (out.kind == CutKind::Linear) {
    const auto& row = p.linear[out.index];
    for (std::size_t a = 0; a < row.cols.size(); ++a) out.normal[row.cols[a]] += row.vals[a];
  } else {
    const auto& par = p.parabolas[out.index];
    out.normal[par.s] = 2.0 * x[par.s];
    out.normal[par.t] = -1.0;
  }
  return out;
}

double ellipsoid_objective(const EllipsoidProblem& p, std::span<const double> x) {
  double f = 0.0;
  for (std::size_t i = 0; i < p.u_col.size(); ++i) f -= p.budgets[i] * std::log(x[p.u_col[i]]);
  return f;
}

std::vector<double> first_order_oracle(const EllipsoidProblem& p, std::span<const double> x) {
  std::vector<double> g(p.dim, 0.0);
  for (std::size_t i = 0; i < p.u_col.size(); ++i) g[p.u_col[i]] = -p.budgets[i] / x[p.u_col[i]];
  return g;
}

std::vector<double> uniform_split_point(const EllipsoidProblem& p) {
  std::vector<double> x(p.dim, 0.0);
  std::vector<double> total(p.u_col.size(), 0.0);
  for (std::size_t k = 0; k < p.segments.size(); ++k) {
    const auto& seg = p.segments[k];
    const std::size_t m = seg.order.size();
    for (std::size_t j = 0; j < m; ++j) {
      const double lo = static_cast<double>(j) / static_cast<double>(m);
      const double hi = static_cast<double>(j + 1) / static_cast<double>(m);
      const double uh = hat_value(seg, j, lo, hi);
      x[p.uhat_col[k][j]] = uh;
      total[seg.order[j]] += seg.lambda[seg.order[j]] * uh;
      if (j + 1 < m) {
        x[p.s_col[k][j]] = hi;
        x[p.t_col[k][j]] = hi * hi;
      }
    }
  }
  for (std::size_t i = 0; i < p.u_col.size(); ++i) {
    x[p.u_col[i]] = std::clamp(total[i], std::min(p.budgets[i], 0.5 * p.eps), 1.0);
  }
  return x;
}

namespace {

struct Run {
  Eigen::VectorXd best;
  double best_f = std::numeric_limits<double>::infinity();
  double lower = -std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  std::size_t separation_calls = 0;
  std::size_t objective_calls = 0;
  bool breakdown = false;
};

void run_ellipsoid(const EllipsoidProblem& p, Eigen::VectorXd c, double radius, std::size_t max_iter,
                   double f_tol, bool record, Run& run, std::vector<EllipsoidLogRow>& log) {
  const auto d = static_cast<Eigen::Index>(p.dim);
  const double dd = static_cast<double>(p.dim);
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(d, d) * radius * radius;
  const double expand = dd * dd / (dd * dd - 1.0);
  const double shrink = 2.0 / (dd + 1.0);
  const double dlogvol = 0.5 * (dd * std::log(expand) + std::log((dd - 1.0) / (dd + 1.0)));
  double log_volume = dd * std::log(radius);
  Eigen::VectorXd g(d);
  Eigen::VectorXd pg(d);

  for (std::size_t it = 0; it < max_iter; ++it) {
    ++run.iterations;
    const std::span<const double> x(c.data(), p.dim);
    ++run.separation_calls;
    Separation sep = separation_oracle(p, x);
    CutKind kind = sep.kind;
    double f = kNaN;
    if (kind == CutKind::None) {
      ++run.objective_calls;
      kind = CutKind::Objective;
      f = ellipsoid_objective(p, x);
      sep.normal = first_order_oracle(p, x);
      if (f < run.best_f) {
        run.best_f = f;
        run.best = c;
      }
    }
    g = Eigen::Map<const Eigen::VectorXd>(sep.normal.data(), d);
    pg.noalias() = P.selfadjointView<Eigen::Lower>() * g;
    const double gpg = g.dot(pg);
    if (!(gpg > 0.0) || !std::isfinite(gpg)) {
      run.breakdown = true;
      return;
    }
    const double root = std::sqrt(gpg);
    if (kind == CutKind::Objective) {
      run.lower = std::max(run.lower, f - root);
    }
    if (record) log.push_back({run.iterations, kind, f, log_volume});
    if (run.best_f - run.lower <= f_tol) return;

    const Eigen::VectorXd b = pg / root;
    c -= b / (dd + 1.0);
    P.triangularView<Eigen::Lower>() -= shrink * (b * b.transpose());
    P.triangularView<Eigen::Lower>() *= expand;
    log_volume += dlogvol;
    if (run.iterations % 50 == 0) {
      // Only the lower triangle is read; mirror it to keep the full matrix symmetric.
      P = P.selfadjointView<Eigen::Lower>();
    }
  }
}

}  // namespace

EllipsoidResult ellipsoid_solve(const MarketInstance& inst, const EllipsoidConfig& cfg) {
  const std::size_t n = inst.buyers();
  const std::size_t K = inst.segments();
  if (!(cfg.epsilon > 0.0 && cfg.epsilon < 1.0)) {
    throw ValidationError("ellipsoid epsilon must lie in (0, 1)");
  }
  const double kap = kappa(inst);
  const double eps_int = cfg.epsilon / (2.0 * kap + static_cast<double>(K) + 1.0);
  const EllipsoidProblem p = build_ellipsoid_problem(inst, eps_int);
  // Strong convexity (modulus 1/kappa) turns an objective gap g into
  // |u - u*| <= sqrt(2 g kappa); this keeps that below 2 kappa eps_int.
  const double f_tol = std::min(eps_int, 2.0 * kap * eps_int * eps_int);

  EllipsoidResult res;
  res.internal_eps = eps_int;
  res.objective_tol = f_tol;
  res.dim = p.dim;
  const double dd = static_cast<double>(p.dim);
  const double R = 2.0 * std::sqrt(dd);
  const double V = std::log(kap) + std::log(2.0 / eps_int);
  const double r = eps_int / 2.0;
  res.call_bound = dd * dd * std::log(2.0 + V * R / (f_tol * r));
  const std::size_t max_iter =
      cfg.max_iter > 0 ? cfg.max_iter : static_cast<std::size_t>(8.0 * res.call_bound);

  const std::vector<double> start = uniform_split_point(p);
  Eigen::VectorXd center = Eigen::Map<const Eigen::VectorXd>(start.data(), static_cast<Eigen::Index>(p.dim));
  Run run;
  double radius = R;
  for (;;) {
    run_ellipsoid(p, center, radius, max_iter - std::min(max_iter, run.iterations), f_tol,
                  cfg.record_log, run, res.log);
    if (!run.breakdown) break;
    if (res.restarts == 3) throw NumericalBreakdown("ellipsoid shape matrix lost positive definiteness");
    ++res.restarts;
    run.breakdown = false;
    radius *= 2.0;
    // Restarting at the best center keeps the progress; the lower bound stays valid.
    if (run.best.size() > 0) center = run.best;
  }
  if (run.best.size() == 0) throw NumericalBreakdown("ellipsoid found no feasible center");
  res.iterations = run.iterations;
  res.separation_calls = run.separation_calls;
  res.objective_calls = run.objective_calls;
  res.objective = run.best_f;
  res.lower_bound = run.lower;
  res.certified = run.best_f - run.lower <= f_tol;

  // Discount: u_hat by eps (moving u_ik by lambda eps), then u_ik by eps.
  res.segment_utilities.assign(n * K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& seg = p.segments[k];
    std::vector<double> u(n, 0.0);
    for (std::size_t j = 0; j < seg.order.size(); ++j) {
      const std::size_t i = seg.order[j];
      const double uh = std::max(run.best(static_cast<Eigen::Index>(p.uhat_col[k][j])) - eps_int, 0.0);
      u[i] = std::max(seg.lambda[i] * uh - eps_int, 0.0);
    }
    if (!membership(seg, u)) {
      ++res.rescued_segments;
      const double alpha = feasible_scale(seg, u);
      for (double& x : u) x *= alpha;
    }
    for (std::size_t i = 0; i < n; ++i) res.segment_utilities[i * K + k] = u[i];
  }
  res.utilities.assign(n, 0.0);
  res.beta.assign(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < K; ++k) res.utilities[i] += res.segment_utilities[i * K + k];
    res.beta[i] = std::clamp(inst.budget(i) / res.utilities[i], inst.budget(i), 1.0);
  }
  res.allocation = allocation_from_segment_utilities(inst, res.segment_utilities);
  return res;
}

EquilibriumResult to_equilibrium(const MarketInstance& instance, const EllipsoidResult& result) {
  EquilibriumResult out = result_from_allocation(instance, result.beta, result.allocation);
  out.iterations = result.iterations;
  return out;
}

void write_log_csv(std::ostream& out, const EllipsoidResult& result) {
  out << "iteration,objective,cut,log_volume\n";
  out.precision(17);
  for (const auto& row : result.log) {
    out << row.iteration << ',';
    if (!std::isnan(row.objective)) out << row.objective;
    out << ',' << to_string(row.cut) << ',' << row.log_volume << '\n';
  }
}

}  // namespace fisherfair
