#include "fisherfair/market_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fisherfair/errors.hpp"
#include "fisherfair/random.hpp"

namespace fisherfair {

double eval_interval(const LinearPiece& piece, Interval iv) noexcept {
  // (hi - lo) * v(midpoint): exact zero on degenerate intervals and additive to roundoff.
  return iv.length() * (0.5 * piece.slope * (iv.hi + iv.lo) + piece.intercept);
}

double cut(const LinearPiece& piece, double a, double u0, double segment_end) {
  if (u0 <= 0.0) return a;
  const double remaining = eval_interval(piece, {a, segment_end});
  const double slack = tol::cut_tol * std::max(1.0, std::abs(remaining));
  const double va = piece(a);
  if (std::abs(piece.slope) < tol::c_eps && std::abs(va) < tol::c_eps && u0 > slack) {
    throw DegeneratePiece("cut: piece is identically zero but utility " + std::to_string(u0) +
                          " was requested");
  }
  if (u0 > remaining + slack) {
    std::ostringstream msg;
    msg << "cut: requested utility " << u0 << " exceeds remaining segment value " << remaining;
    throw UnreachableUtility(msg.str());
  }
  if (u0 >= remaining) return segment_end;

  double offset;
  if (std::abs(piece.slope) < tol::c_eps) {
    offset = u0 / va;
  } else {
    double disc = va * va + 2.0 * piece.slope * u0;
    if (disc < 0.0) {
      // The density's root lies at or past segment_end, so only roundoff lands here.
      disc = 0.0;
    }
    offset = 2.0 * u0 / (va + std::sqrt(disc));
  }
  return std::clamp(a + offset, a, segment_end);
}

std::string to_string(Mode mode) {
  return mode == Mode::Linear ? "linear" : "quasilinear";
}

MarketInstance::MarketInstance(Mode mode, std::vector<double> budgets, std::vector<double> grid,
                               std::vector<LinearPiece> pieces)
    : mode_(mode),
      budgets_(std::move(budgets)),
      grid_(std::move(grid)),
      pieces_(std::move(pieces)),
      value_scale_(budgets_.size(), 1.0) {}

std::size_t MarketInstance::segment_of(double theta) const noexcept {
  const auto interior_begin = grid_.begin() + 1;
  const auto interior_end = grid_.end() - 1;
  const auto it = std::upper_bound(interior_begin, interior_end, theta);
  return static_cast<std::size_t>(it - interior_begin);
}

double MarketInstance::value_at(std::size_t i, double theta) const noexcept {
  return piece(i, segment_of(theta))(theta);
}

double MarketInstance::value(std::size_t i, Interval iv) const noexcept {
  if (iv.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t k = segment_of(iv.lo); k < segments(); ++k) {
    const double lo = std::max(iv.lo, grid_[k]);
    const double hi = std::min(iv.hi, grid_[k + 1]);
    if (lo >= iv.hi) break;
    if (hi > lo) total += eval_interval(piece(i, k), {lo, hi});
  }
  return total;
}

double MarketInstance::total_value(std::size_t i) const noexcept {
  double total = 0.0;
  for (std::size_t k = 0; k < segments(); ++k) total += eval_interval(piece(i, k), segment(k));
  return total;
}

void MarketInstance::validate() const {
  const std::size_t n = buyers();
  if (n == 0) throw ValidationError("at least one buyer is required");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(budgets_[i] > 0.0) || !std::isfinite(budgets_[i])) {
      throw ValidationError("nonpositive budget: buyer " + std::to_string(i + 1));
    }
  }
  if (grid_.size() < 2) throw ValidationError("breakpoints need at least two entries");
  if (std::abs(grid_.front()) > tol::grid_eps || std::abs(grid_.back() - 1.0) > tol::grid_eps) {
    throw ValidationError("breakpoints must start at 0 and end at 1");
  }
  for (std::size_t k = 0; k + 1 < grid_.size(); ++k) {
    if (!(grid_[k + 1] > grid_[k])) {
      throw ValidationError("unsorted grid: breakpoints must be strictly increasing (index " +
                            std::to_string(k + 1) + ")");
    }
  }
  const std::size_t K = segments();
  if (pieces_.size() != n * K) throw ValidationError("coefficient arrays must be n x K");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const LinearPiece& p = piece(i, k);
      if (!std::isfinite(p.slope) || !std::isfinite(p.intercept)) {
        throw ValidationError("non-finite coefficient: buyer " + std::to_string(i + 1));
      }
      if (p(grid_[k]) < -tol::nonneg || p(grid_[k + 1]) < -tol::nonneg) {
        std::ostringstream msg;
        msg << "negative density: buyer " << i + 1 << " on segment " << k + 1 << " ["
            << grid_[k] << ", " << grid_[k + 1] << "]";
        throw ValidationError(msg.str());
      }
    }
    if (!(total_value(i) > 0.0)) {
      throw ValidationError("zero-value buyer: buyer " + std::to_string(i + 1) +
                            " values the whole interval at zero");
    }
  }
}

MarketInstance MarketInstance::normalized() const {
  MarketInstance out = *this;
  const double budget_sum = std::accumulate(budgets_.begin(), budgets_.end(), 0.0);
  for (double& b : out.budgets_) b /= budget_sum;
  out.budget_scale_ = budget_scale_ * budget_sum;
  const std::size_t K = segments();
  for (std::size_t i = 0; i < buyers(); ++i) {
    const double factor = mode_ == Mode::Linear ? total_value(i) : budget_sum;
    for (std::size_t k = 0; k < K; ++k) {
      LinearPiece& p = out.pieces_[i * K + k];
      p.slope /= factor;
      p.intercept /= factor;
    }
    out.value_scale_[i] = value_scale_[i] * factor;
  }
  return out;
}

namespace {

using nlohmann::json;

std::vector<double> number_array(const json& node, const std::string& what) {
  if (!node.is_array()) throw ValidationError(what + " must be an array of numbers");
  std::vector<double> out;
  out.reserve(node.size());
  for (const auto& v : node) {
    if (!v.is_number()) throw ValidationError(what + " must contain only numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

std::vector<double> unify_grids(const std::vector<std::vector<double>>& grids) {
  std::vector<double> all;
  for (const auto& g : grids) all.insert(all.end(), g.begin(), g.end());
  std::sort(all.begin(), all.end());
  std::vector<double> unified;
  for (double a : all) {
    if (unified.empty() || a - unified.back() > tol::grid_eps) unified.push_back(a);
  }
  unified.front() = 0.0;
  if (unified.size() >= 2 && 1.0 - unified.back() <= tol::grid_eps) unified.back() = 1.0;
  return unified;
}

}  // namespace

MarketInstance load_instance(const json& document) {
  if (!document.is_object()) throw ValidationError("instance document must be a JSON object");
  for (const char* key : {"budgets", "breakpoints", "c", "d"}) {
    if (!document.contains(key)) throw ValidationError(std::string("missing field: ") + key);
  }
  Mode mode = Mode::Linear;
  if (document.contains("mode")) {
    const auto m = document.at("mode");
    if (!m.is_string()) throw ValidationError("mode must be \"linear\" or \"quasilinear\"");
    if (m == "linear") {
      mode = Mode::Linear;
    } else if (m == "quasilinear") {
      mode = Mode::Quasilinear;
    } else {
      throw ValidationError("mode must be \"linear\" or \"quasilinear\"");
    }
  }

  const std::vector<double> budgets = number_array(document.at("budgets"), "budgets");
  const std::size_t n = budgets.size();
  if (n == 0) throw ValidationError("at least one buyer is required");

  const json& bp = document.at("breakpoints");
  const json& cs = document.at("c");
  const json& ds = document.at("d");
  if (!bp.is_array() || bp.empty()) throw ValidationError("breakpoints must be a nonempty array");
  if (!cs.is_array() || !ds.is_array() || cs.size() != n || ds.size() != n) {
    throw ValidationError("c and d must have one row per buyer");
  }

  const bool per_buyer = bp.front().is_array();
  if (per_buyer && bp.size() != n) {
    throw ValidationError("per-buyer breakpoints must have one grid per buyer");
  }

  std::vector<std::vector<double>> grids(n);
  std::vector<std::vector<LinearPiece>> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    grids[i] = number_array(per_buyer ? bp.at(i) : bp, "breakpoints");
    const auto& g = grids[i];
    if (g.size() < 2) throw ValidationError("breakpoints need at least two entries");
    if (std::abs(g.front()) > tol::grid_eps || std::abs(g.back() - 1.0) > tol::grid_eps) {
      throw ValidationError("breakpoints must start at 0 and end at 1");
    }
    for (std::size_t k = 0; k + 1 < g.size(); ++k) {
      if (g[k + 1] < g[k]) {
        throw ValidationError("unsorted grid: breakpoints must be nondecreasing (index " +
                              std::to_string(k + 1) + ")");
      }
    }
    const auto c = number_array(cs.at(i), "c row");
    const auto d = number_array(ds.at(i), "d row");
    if (c.size() != g.size() - 1 || d.size() != g.size() - 1) {
      throw ValidationError("c and d rows must have one entry per segment (buyer " +
                            std::to_string(i + 1) + ")");
    }
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (g[k + 1] - g[k] <= tol::grid_eps) continue;
      const LinearPiece p{c[k], d[k]};
      if (p(g[k]) < -tol::nonneg || p(g[k + 1]) < -tol::nonneg) {
        std::ostringstream msg;
        msg << "negative density: buyer " << i + 1 << " on segment " << k + 1 << " [" << g[k]
            << ", " << g[k + 1] << "]";
        throw ValidationError(msg.str());
      }
    }
    rows[i].resize(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) rows[i][k] = {c[k], d[k]};
  }

  const std::vector<double> grid = unify_grids(grids);
  const std::size_t K = grid.size() - 1;
  std::vector<LinearPiece> pieces(n * K);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = grids[i];
    for (std::size_t k = 0; k < K; ++k) {
      const double mid = 0.5 * (grid[k] + grid[k + 1]);
      // Buyer segment containing the midpoint of the unified segment.
      auto it = std::upper_bound(g.begin() + 1, g.end() - 1, mid);
      std::size_t own = static_cast<std::size_t>(it - (g.begin() + 1));
      pieces[i * K + k] = rows[i][own];
    }
  }

  MarketInstance instance(mode, budgets, grid, std::move(pieces));
  instance.validate();
  return instance.normalized();
}

MarketInstance load_instance_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open instance file: " + path);
  json document;
  try {
    in >> document;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed instance JSON: ") + e.what());
  }
  return load_instance(document);
}

json sample_instance(std::size_t n, std::size_t segments, std::uint64_t seed, Mode mode) {
  if (n == 0 || segments == 0) throw ValidationError("sample_instance needs n >= 1 and k >= 1");
  std::mt19937_64 rng(seed);
  // Segment lengths in [0.2, 1] keep the grid well separated.
  std::vector<double> grid{0.0};
  double acc = 0.0;
  std::vector<double> lengths(segments);
  for (auto& len : lengths) {
    len = 0.2 + 0.8 * unit_uniform(rng);
    acc += len;
  }
  double run = 0.0;
  for (std::size_t k = 0; k + 1 < segments; ++k) {
    run += lengths[k];
    grid.push_back(run / acc);
  }
  grid.push_back(1.0);

  json c = json::array();
  json d = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    json crow = json::array();
    json drow = json::array();
    for (std::size_t k = 0; k < segments; ++k) {
      const double lo = grid[k];
      const double hi = grid[k + 1];
      const double vlo = unit_uniform(rng);
      const double vhi = unit_uniform(rng);
      const double slope = (vhi - vlo) / (hi - lo);
      crow.push_back(slope);
      drow.push_back(vlo - slope * lo);
    }
    c.push_back(std::move(crow));
    d.push_back(std::move(drow));
  }
  std::vector<double> budgets(n);
  double total = 0.0;
  for (auto& b : budgets) {
    b = 0.1 + 0.9 * unit_uniform(rng);
    total += b;
  }
  for (auto& b : budgets) b /= total;
  return json{{"mode", to_string(mode)},
              {"budgets", budgets},
              {"breakpoints", grid},
              {"c", std::move(c)},
              {"d", std::move(d)}};
}

json to_json(const MarketInstance& instance) {
  json c = json::array();
  json d = json::array();
  for (std::size_t i = 0; i < instance.buyers(); ++i) {
    json crow = json::array();
    json drow = json::array();
    for (std::size_t k = 0; k < instance.segments(); ++k) {
      crow.push_back(instance.piece(i, k).slope);
      drow.push_back(instance.piece(i, k).intercept);
    }
    c.push_back(std::move(crow));
    d.push_back(std::move(drow));
  }
  const auto budgets = instance.budgets();
  const auto grid = instance.grid();
  return json{{"mode", to_string(instance.mode())},
              {"budgets", std::vector<double>(budgets.begin(), budgets.end())},
              {"breakpoints", std::vector<double>(grid.begin(), grid.end())},
              {"c", std::move(c)},
              {"d", std::move(d)}};
}

}  // namespace fisherfair
