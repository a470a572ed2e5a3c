#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dpstride/errors.hpp"
#include "dpstride/matrix.hpp"
#include "dpstride/table.hpp"

#include <json.hpp>

namespace dpstride {

// A refinement path through the grid: indices[0] = 0, indices.back() = T,
// strictly increasing. K() is the number of refinement steps (transitions).
struct StridePath {
  std::vector<std::size_t> indices;
  std::vector<double> times;

  std::size_t K() const { return indices.empty() ? 0 : indices.size() - 1; }
};

inline StridePath path_from_indices(const Grid& grid, std::vector<std::size_t> indices) {
  if (indices.size() < 2) throw ArgumentError("path needs at least 2 indices");
  if (indices.front() != 0 || indices.back() != grid.T())
    throw ArgumentError("path must start at index 0 and end at the last grid index");
  for (std::size_t i = 0; i + 1 < indices.size(); ++i)
    if (!(indices[i] < indices[i + 1])) throw ArgumentError("path indices must be strictly increasing");
  StridePath p;
  p.times.reserve(indices.size());
  for (std::size_t idx : indices) p.times.push_back(grid.time(idx));
  p.indices = std::move(indices);
  return p;
}

// Cost of a path under the table: sum of jump losses, accumulated in
// increasing transition order. The same fold order is used everywhere a path
// cost is formed, so equal paths always produce bit-equal costs.
inline double path_cost(const CostTable& table, const StridePath& path) {
  double cost = 0.0;
  for (std::size_t i = 1; i < path.indices.size(); ++i)
    cost += table.L(path.indices[i], path.indices[i - 1]);
  return cost;
}

// C(k, t) is the least total loss of reaching grid index t from index 0 in
// exactly k jumps; D(k, t) is the predecessor realizing it (smallest index
// on ties). Solving once covers every budget 1..T.
struct DpTables {
  MatrixD C;
  Matrix<std::int64_t> D;
};

inline DpTables solve_all_budgets(const CostTable& table) {
  std::size_t T = table.grid.T();
  double inf = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t <= T; ++t)
    for (std::size_t s = t; s <= T; ++s)
      if (table.L(t, s) != inf) throw ValidationError("cost table has finite entries above the diagonal");
  DpTables dp;
  dp.C = MatrixD(T + 1, T + 1, inf);
  dp.D = Matrix<std::int64_t>(T + 1, T + 1, -1);
  dp.C(0, 0) = 0.0;
  for (std::size_t k = 1; k <= T; ++k) {
    for (std::size_t t = k; t <= T; ++t) {
      double best = inf;
      std::int64_t arg = -1;
      for (std::size_t s = 0; s < t; ++s) {
        double c = dp.C(k - 1, s) + table.L(t, s);
        if (c < best) {  // strict: ties keep the smallest predecessor
          best = c;
          arg = static_cast<std::int64_t>(s);
        }
      }
      dp.C(k, t) = best;
      dp.D(k, t) = arg;
    }
  }
  return dp;
}

inline StridePath extract_path(const DpTables& dp, const Grid& grid, std::size_t K) {
  std::size_t T = grid.T();
  if (K < 1 || K > T) throw ArgumentError("budget must be between 1 and T");
  if (!(dp.C(K, T) < std::numeric_limits<double>::infinity()))
    throw InfeasibleError("no path reaches the endpoint in " + std::to_string(K) + " jumps");
  std::vector<std::size_t> rev;
  rev.push_back(T);
  std::size_t t = T;
  for (std::size_t k = K; k >= 1; --k) {
    std::int64_t s = dp.D(k, t);
    if (s < 0) throw Error("internal: broken predecessor chain");
    t = static_cast<std::size_t>(s);
    rev.push_back(t);
  }
  if (t != 0) throw Error("internal: path does not start at 0");
  std::vector<std::size_t> indices(rev.rbegin(), rev.rend());
  return path_from_indices(grid, std::move(indices));
}

// Exhaustive minimum over all paths with exactly K jumps. Tie-breaking
// matches the DP extraction: among equal-cost paths, the one whose later
// interior indices are smallest wins. Exponential; guarded for sanity.
inline StridePath brute_force(const CostTable& table, std::size_t K) {
  std::size_t T = table.grid.T();
  if (K < 1 || K > T) throw ArgumentError("budget must be between 1 and T");
  double n_paths = 1.0;
  for (std::size_t i = 1; i < K; ++i) n_paths *= static_cast<double>(T - i) / static_cast<double>(i);
  if (n_paths > 2e6) throw ArgumentError("brute force table too large");

  std::vector<std::size_t> interior(K - 1);
  for (std::size_t i = 0; i < K - 1; ++i) interior[i] = i + 1;
  std::vector<std::size_t> best_interior;
  double best = std::numeric_limits<double>::infinity();
  auto later_smaller = [](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    for (std::size_t i = a.size(); i-- > 0;) {
      if (a[i] != b[i]) return a[i] < b[i];
    }
    return false;
  };
  for (;;) {
    double cost = 0.0;
    std::size_t prev = 0;
    for (std::size_t idx : interior) {
      cost += table.L(idx, prev);
      prev = idx;
    }
    cost += table.L(T, prev);
    if (cost < best || (cost == best && later_smaller(interior, best_interior))) {
      best = cost;
      best_interior = interior;
    }
    // next (K-1)-subset of {1..T-1} in lexicographic order
    std::size_t i = interior.size();
    while (i > 0 && interior[i - 1] == T - 1 - (interior.size() - i)) --i;
    if (i == 0) break;
    ++interior[i - 1];
    for (std::size_t j = i; j < interior.size(); ++j) interior[j] = interior[j - 1] + 1;
  }
  if (!(best < std::numeric_limits<double>::infinity()))
    throw InfeasibleError("no path reaches the endpoint in " + std::to_string(K) + " jumps");
  std::vector<std::size_t> indices;
  indices.push_back(0);
  for (std::size_t idx : best_interior) indices.push_back(idx);
  indices.push_back(T);
  return path_from_indices(table.grid, std::move(indices));
}

namespace detail {

inline std::vector<std::size_t> spread_indices(std::size_t T, std::size_t K,
                                               const std::vector<double>& raw) {
  std::vector<std::size_t> idx;
  for (double r : raw) {
    auto v = static_cast<std::size_t>(std::floor(r + 0.5));
    if (v > T) v = T;
    if (idx.empty() || v != idx.back()) idx.push_back(v);
  }
  // Rounding can collapse neighbors; refill by splitting the widest gap
  // (first such gap on ties) until the path has K jumps again.
  while (idx.size() < K + 1) {
    std::size_t gap_at = 0, gap = 0;
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
      if (idx[i + 1] - idx[i] > gap) {
        gap = idx[i + 1] - idx[i];
        gap_at = i;
      }
    }
    if (gap < 2) throw ArgumentError("budget exceeds grid resolution");
    idx.insert(idx.begin() + static_cast<std::ptrdiff_t>(gap_at) + 1, idx[gap_at] + gap / 2);
  }
  return idx;
}

}  // namespace detail

// K equal jumps (up to rounding).
inline StridePath even_stride(const Grid& grid, std::size_t K) {
  std::size_t T = grid.T();
  if (K < 1 || K > T) throw ArgumentError("budget must be between 1 and T");
  std::vector<double> raw(K + 1);
  for (std::size_t i = 0; i <= K; ++i)
    raw[i] = static_cast<double>(T) * static_cast<double>(i) / static_cast<double>(K);
  return path_from_indices(grid, detail::spread_indices(T, K, raw));
}

// Jumps concentrated near t = 0, spacing growing quadratically.
inline StridePath quadratic_stride(const Grid& grid, std::size_t K) {
  std::size_t T = grid.T();
  if (K < 1 || K > T) throw ArgumentError("budget must be between 1 and T");
  std::vector<double> raw(K + 1);
  for (std::size_t i = 0; i <= K; ++i) {
    double r = static_cast<double>(i) / static_cast<double>(K);
    raw[i] = static_cast<double>(T) * r * r;
  }
  return path_from_indices(grid, detail::spread_indices(T, K, raw));
}

// Optimal schedules for every feasible budget, ordered by K. cost_nats is
// the path cost alone; total_nats adds the endpoint mismatch term.
inline nlohmann::json schedules_json(const DpTables& dp, const CostTable& table) {
  std::size_t T = table.grid.T();
  nlohmann::json out;
  out["schema"] = "dpstride.schedules.v1";
  out["T"] = T;
  out["schedule"] = table.schedule_name;
  out["dim"] = table.dim;
  out["mc_samples"] = table.mc_samples;
  out["prior_nats"] = table.prior_term;
  nlohmann::json budgets = nlohmann::json::array();
  double ln2 = std::numbers::ln2;
  for (std::size_t K = 1; K <= T; ++K) {
    if (!(dp.C(K, T) < std::numeric_limits<double>::infinity())) continue;
    StridePath path = extract_path(dp, table.grid, K);
    double cost = dp.C(K, T);
    double total = cost + table.prior_term;
    nlohmann::json entry;
    entry["K"] = K;
    entry["indices"] = path.indices;
    entry["times"] = path.times;
    entry["cost_nats"] = cost;
    entry["total_nats"] = total;
    entry["bits_per_dim"] = total / (static_cast<double>(table.dim) * ln2);
    budgets.push_back(std::move(entry));
  }
  out["budgets"] = std::move(budgets);
  return out;
}

// Reads one budget's path back out of a schedules document.
inline StridePath path_from_schedules(const nlohmann::json& doc, std::size_t K) {
  if (!doc.contains("budgets") || !doc["budgets"].is_array())
    throw FileFormatError("schedules document has no budgets array");
  for (const auto& entry : doc["budgets"]) {
    if (entry.at("K").get<std::size_t>() != K) continue;
    StridePath p;
    p.indices = entry.at("indices").get<std::vector<std::size_t>>();
    p.times = entry.at("times").get<std::vector<double>>();
    if (p.indices.size() != p.times.size() || p.indices.size() < 2)
      throw FileFormatError("schedules entry is malformed");
    return p;
  }
  throw ArgumentError("schedules document has no entry for budget " + std::to_string(K));
}

}  // namespace dpstride
