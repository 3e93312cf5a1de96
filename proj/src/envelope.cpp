#include "fisherfair/envelope.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fisherfair/errors.hpp"

namespace fisherfair {

namespace {

constexpr double kTieRel = 1e-13;

bool nearly_equal(double a, double b) {
  return std::abs(a - b) <= kTieRel * std::max({1.0, std::abs(a), std::abs(b)});
}

struct SegmentEnvelope {
  std::vector<double> starts;  // left endpoint of each piece
  std::vector<LinearPiece> pieces;
  std::vector<int> owner;
};

// Upper envelope of the scaled lines on one grid segment.
SegmentEnvelope segment_envelope(const MarketInstance& instance, std::span<const double> beta,
                                 std::size_t k) {
  const std::size_t n = instance.buyers();
  const Interval seg = instance.segment(k);
  std::vector<LinearPiece> lines(n);
  for (std::size_t i = 0; i < n; ++i) {
    const LinearPiece& p = instance.piece(i, k);
    lines[i] = {beta[i] * p.slope, beta[i] * p.intercept};
  }

  // Leader at x: highest value, then steepest slope, then smallest index.
  auto better_at = [&](std::size_t a, std::size_t b, double x) {
    const double va = lines[a](x);
    const double vb = lines[b](x);
    if (!nearly_equal(va, vb)) return va > vb;
    if (!nearly_equal(lines[a].slope, lines[b].slope)) return lines[a].slope > lines[b].slope;
    return a < b;
  };

  SegmentEnvelope out;
  double x = seg.lo;
  std::size_t cur = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (better_at(j, cur, x)) cur = j;
  }
  while (true) {
    double next_x = seg.hi;
    std::size_t next = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == cur) continue;
      const double ds = lines[j].slope - lines[cur].slope;
      if (ds <= 0.0 || nearly_equal(lines[j].slope, lines[cur].slope)) continue;
      const double xc = (lines[cur].intercept - lines[j].intercept) / ds;
      if (!(xc > x) || xc >= seg.hi) continue;
      if (next == n || xc < next_x ||
          (xc == next_x && (lines[j].slope > lines[next].slope ||
                            (lines[j].slope == lines[next].slope && j < next)))) {
        next_x = xc;
        next = j;
      }
    }
    out.starts.push_back(x);
    out.pieces.push_back(lines[cur]);
    out.owner.push_back(static_cast<int>(cur));
    if (next == n) break;
    x = next_x;
    cur = next;
  }
  return out;
}

}  // namespace

std::size_t PiecewiseLinearFunction::piece_of(double theta) const noexcept {
  if (pieces.empty()) return 0;
  const auto it = std::upper_bound(breakpoints.begin() + 1, breakpoints.end() - 1, theta);
  return static_cast<std::size_t>(it - (breakpoints.begin() + 1));
}

double PiecewiseLinearFunction::operator()(double theta) const noexcept {
  if (pieces.empty()) return 0.0;
  return pieces[piece_of(theta)](theta);
}

PriceBox price_box(const MarketInstance& instance) {
  const std::size_t n = instance.buyers();
  PriceBox box{std::vector<double>(n), std::vector<double>(n, 1.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const double b = instance.budget(i);
    box.lower[i] =
        instance.mode() == Mode::Linear ? b : b / (instance.total_value(i) + b);
  }
  return box;
}

PiecewiseLinearFunction upper_envelope(const MarketInstance& instance,
                                       std::span<const double> beta, Execution exec) {
  const std::size_t K = instance.segments();
  std::vector<SegmentEnvelope> parts(K);
  if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic) num_threads(thread_cap())
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(K); ++k) {
      parts[k] = segment_envelope(instance, beta, static_cast<std::size_t>(k));
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) parts[k] = segment_envelope(instance, beta, k);
  }

  PiecewiseLinearFunction f;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& part = parts[k];
    for (std::size_t m = 0; m < part.pieces.size(); ++m) {
      f.breakpoints.push_back(part.starts[m]);
      f.pieces.push_back(part.pieces[m]);
      f.owner.push_back(part.owner[m]);
      f.segment.push_back(k);
    }
  }
  f.breakpoints.push_back(1.0);
  return f;
}

double integral(const PiecewiseLinearFunction& f) noexcept {
  double total = 0.0;
  for (std::size_t m = 0; m < f.size(); ++m) total += eval_interval(f.pieces[m], f.span(m));
  return total;
}

std::vector<double> winning_segment_utilities(const MarketInstance& instance,
                                              const PiecewiseLinearFunction& envelope) {
  const std::size_t K = instance.segments();
  std::vector<double> u(instance.buyers() * K, 0.0);
  for (std::size_t m = 0; m < envelope.size(); ++m) {
    const auto i = static_cast<std::size_t>(envelope.owner[m]);
    const std::size_t k = envelope.segment[m];
    u[i * K + k] += eval_interval(instance.piece(i, k), envelope.span(m));
  }
  return u;
}

std::vector<double> winning_utilities(const MarketInstance& instance,
                                      const PiecewiseLinearFunction& envelope) {
  std::vector<double> u(instance.buyers(), 0.0);
  for (std::size_t m = 0; m < envelope.size(); ++m) {
    const auto i = static_cast<std::size_t>(envelope.owner[m]);
    u[i] += eval_interval(instance.piece(i, envelope.segment[m]), envelope.span(m));
  }
  return u;
}

std::vector<double> winning_utilities(const MarketInstance& instance,
                                      std::span<const double> beta, Execution exec) {
  return winning_utilities(instance, upper_envelope(instance, beta, exec));
}

namespace {

void check_domain(const MarketInstance& instance, std::span<const double> beta) {
  if (beta.size() != instance.buyers()) {
    throw DomainError("utility prices must have one entry per buyer");
  }
  for (std::size_t i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0)) {
      std::ostringstream msg;
      msg << "utility price of buyer " << i + 1 << " must be positive, got " << beta[i];
      throw DomainError(msg.str());
    }
    if (instance.mode() == Mode::Quasilinear && beta[i] > 1.0 + 1e-12) {
      std::ostringstream msg;
      msg << "quasilinear utility price of buyer " << i + 1 << " exceeds 1: " << beta[i];
      throw DomainError(msg.str());
    }
  }
}

}  // namespace

double dual_objective(const MarketInstance& instance, std::span<const double> beta,
                      const PiecewiseLinearFunction& envelope) {
  check_domain(instance, beta);
  double value = integral(envelope);
  for (std::size_t i = 0; i < beta.size(); ++i) value -= instance.budget(i) * std::log(beta[i]);
  return value;
}

double dual_objective(const MarketInstance& instance, std::span<const double> beta) {
  check_domain(instance, beta);
  return dual_objective(instance, beta, upper_envelope(instance, beta));
}

Eigen::MatrixXd envelope_hessian(const MarketInstance& instance,
                                 const PiecewiseLinearFunction& envelope) {
  const std::size_t n = instance.buyers();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                            static_cast<Eigen::Index>(n));
  for (std::size_t m = 0; m + 1 < envelope.size(); ++m) {
    if (envelope.segment[m] != envelope.segment[m + 1]) continue;
    const int left = envelope.owner[m];
    const int right = envelope.owner[m + 1];
    if (left == right) continue;
    const double slope_gap = envelope.pieces[m + 1].slope - envelope.pieces[m].slope;
    if (!(slope_gap > 1e-14)) continue;
    const double x = envelope.breakpoints[m + 1];
    const std::size_t k = envelope.segment[m];
    const double vl = instance.piece(static_cast<std::size_t>(left), k)(x);
    const double vr = instance.piece(static_cast<std::size_t>(right), k)(x);
    h(left, left) += vl * vl / slope_gap;
    h(right, right) += vr * vr / slope_gap;
    h(left, right) -= vl * vr / slope_gap;
    h(right, left) -= vl * vr / slope_gap;
  }
  return h;
}

}  // namespace fisherfair
