// Acceptance gate: eight checks, one line each, nonzero exit on any failure.
// Each check pins its tolerances and (where stated) a wall-clock budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dpstride/cli.hpp"
#include "dpstride/dataset.hpp"
#include "dpstride/denoiser.hpp"
#include "dpstride/dp.hpp"
#include "dpstride/eval.hpp"
#include "dpstride/mlp.hpp"
#include "dpstride/random.hpp"
#include "dpstride/table.hpp"

using namespace dpstride;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

bool check(const char* name, double budget_seconds, const std::function<Outcome()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  Outcome r;
  try {
    r = fn();
  } catch (const std::exception& e) {
    r.ok = false;
    r.detail = std::string("exception: ") + e.what();
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (r.ok && budget_seconds > 0.0 && secs > budget_seconds) {
    r.ok = false;
    r.detail += " [over budget of " + std::to_string(budget_seconds) + " s]";
  }
  std::printf("[%s] %s: %s (%.1f s)\n", r.ok ? "PASS" : "FAIL", name, r.detail.c_str(), secs);
  std::fflush(stdout);
  return r.ok;
}

CostTable random_cost_table(std::size_t T, RandomStream& rs) {
  CostTable table;
  table.grid = Grid::uniform(T);
  table.L = MatrixD(T + 1, T + 1, std::numeric_limits<double>::infinity());
  table.var = MatrixD(T + 1, T + 1, 0.0);
  table.dim = 1;
  table.mc_samples = 1;
  table.schedule_name = "trig";
  for (std::size_t t = 1; t <= T; ++t)
    for (std::size_t s = 0; s < t; ++s) table.L(t, s) = rs.next_uniform();
  return table;
}

// Closed-form per-transition loss for gaussian data under the exact
// conditional mean model (fixed posterior variance, continuous decoder).
double oracle_loss(const NoiseSchedule& sched, double s, double t, double d, double var0) {
  ScheduleValues vt = sched.eval(t);
  double marginal = vt.f * vt.f * var0 + vt.g * vt.g;
  double mse = var0 * vt.g * vt.g / marginal;
  if (s == 0.0)
    return 0.5 * d * std::log(2 * std::numbers::pi * vt.g * vt.g) + d * mse / (2 * vt.g * vt.g);
  PosteriorParams post = posterior(sched, s, t);
  return post.coeff_x0 * post.coeff_x0 * d * mse / (2 * post.var);
}

double combined_se(const ElboReport& a, const ElboReport& b) {
  return std::sqrt(a.standard_error * a.standard_error + b.standard_error * b.standard_error);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

Outcome dp_exactness() {
  RandomStream rs(4242, 0);
  int tables = 200;
  for (int rep = 0; rep < tables; ++rep) {
    std::size_t T = 2 + rs.next_u64() % 11;
    CostTable table = random_cost_table(T, rs);
    DpTables dp = solve_all_budgets(table);
    for (std::size_t K = 1; K <= T; ++K) {
      StridePath exhaustive = brute_force(table, K);
      StridePath fast = extract_path(dp, table.grid, K);
      if (dp.C(K, T) != path_cost(table, exhaustive))
        return {false, "cost mismatch at table " + std::to_string(rep) + " K=" + std::to_string(K)};
      if (fast.indices != exhaustive.indices)
        return {false, "path mismatch at table " + std::to_string(rep) + " K=" + std::to_string(K)};
    }
  }
  return {true, "200 random tables (T<=12), every budget: exact cost and identical path"};
}

Outcome dp_dominance() {
  NoiseSchedule sched = NoiseSchedule::trig();
  std::vector<double> mean0{0.3, -0.2};
  double var0 = 0.25;
  AnalyticGaussianDenoiser model(sched, mean0, var0);
  Dataset data = Dataset::gaussian(mean0, var0);
  Grid grid = Grid::uniform(64);
  CostTable table = build_table(model, sched, grid, data, 4096, derive_seed(1001, "table"));
  DpTables dp = solve_all_budgets(table);
  std::uint64_t eval_seed = derive_seed(1001, "eval");
  double worst = -1e300;
  for (std::size_t K : {8, 16, 32, 64}) {
    ElboReport d = elbo_for_path(model, sched, extract_path(dp, grid, K), data, 4096, eval_seed);
    for (const char* kind : {"even", "quadratic"}) {
      StridePath other = kind[0] == 'e' ? even_stride(grid, K) : quadratic_stride(grid, K);
      ElboReport o = elbo_for_path(model, sched, other, data, 4096, eval_seed);
      double excess = d.total_nats - o.total_nats - 3.0 * combined_se(d, o);
      if (excess > worst) worst = excess;
      if (d.total_nats > o.total_nats + 3.0 * combined_se(d, o))
        return {false, "dp worse than " + std::string(kind) + " at K=" + std::to_string(K)};
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof buf,
                "dp <= even and quadratic at K in {8,16,32,64}, 3-SE margin (worst excess %.3f)",
                worst);
  return {true, buf};
}

Outcome memoization() {
  NoiseSchedule sched = NoiseSchedule::trig();
  AnalyticGaussianDenoiser analytic(sched, {0.3, -0.2}, 0.25);
  Dataset gauss = Dataset::gaussian({0.3, -0.2}, 0.25);
  reset_forward_pass_count();
  build_table(analytic, sched, Grid::uniform(16), gauss, 64, 7);
  if (forward_pass_count() != 64 * 16)
    return {false, "analytic build used " + std::to_string(forward_pass_count()) + " passes"};

  MlpConfig cfg;
  cfg.hidden = {8};
  cfg.time_features = 4;
  MlpDenoiser net(2, cfg, 5);
  Dataset mix = Dataset::default_mixture2d();
  BuildOptions opts;
  opts.clip_x0 = true;
  reset_forward_pass_count();
  build_table(net, sched, Grid::uniform(8), mix, 32, 7, opts);
  if (forward_pass_count() != 32 * 8)
    return {false, "mlp build used " + std::to_string(forward_pass_count()) + " passes"};
  return {true, "exactly n_samples * T forward passes per table (64*16 and 32*8, counter-verified)"};
}

Outcome kernel_identities() {
  std::vector<NoiseSchedule> scheds;
  scheds.push_back(NoiseSchedule::trig());
  scheds.push_back(NoiseSchedule::linear_vp());
  for (const NoiseSchedule& sched : scheds) {
    ScheduleValues v0 = sched.eval(0.0), v1 = sched.eval(1.0);
    if (std::abs(v0.f - 1.0) > 1e-12 || std::abs(v0.g) > 1e-12 || std::abs(v1.f) > 1e-12 ||
        std::abs(v1.g - 1.0) > 1e-12)
      return {false, sched.name() + " boundary conditions"};
    // central finite differences; the square-root law is checked away from
    // its endpoint singularities
    double lo = sched.name() == "trig" ? 0.02 : 0.05;
    for (int i = 0; i <= 20; ++i) {
      double t = lo + (1.0 - 2 * lo) * i / 20.0;
      double h = 1e-6;
      ScheduleValues a = sched.eval(t - h), b = sched.eval(t + h), c = sched.eval(t);
      double fd_f = (b.f - a.f) / (2 * h), fd_g = (b.g - a.g) / (2 * h);
      if (std::abs(fd_f - c.df) > 1e-6 * std::max(1.0, std::abs(c.df)))
        return {false, sched.name() + " df mismatch at t=" + std::to_string(t)};
      if (std::abs(fd_g - c.dg) > 1e-6 * std::max(1.0, std::abs(c.dg)))
        return {false, sched.name() + " dg mismatch at t=" + std::to_string(t)};
    }
    RandomStream rs(99, 0);
    for (int rep = 0; rep < 100; ++rep) {
      double a = 0.05 + 0.9 * rs.next_uniform();
      double b = 0.05 + 0.9 * rs.next_uniform();
      double c = 0.05 + 0.9 * rs.next_uniform();
      double u = std::min({a, b, c}), t = std::max({a, b, c});
      double s = a + b + c - u - t;
      if (u == s || s == t) continue;
      TransitionParams full = transition(sched, u, t);
      TransitionParams first = transition(sched, u, s), second = transition(sched, s, t);
      if (std::abs(full.scale - first.scale * second.scale) > 1e-12 * std::abs(full.scale))
        return {false, sched.name() + " composition scale"};
      double var = second.scale * second.scale * first.var() + second.var();
      if (std::abs(full.var() - var) > 1e-12 * full.var())
        return {false, sched.name() + " composition variance"};
      ScheduleValues vs = sched.eval(s), vt = sched.eval(t);
      PosteriorParams post = posterior(sched, s, t);
      // plugging the noiseless x_t = f(t) x_0 into the posterior mean must
      // return f(s) x_0, and the variance must match its product form
      if (std::abs(post.coeff_x0 + post.coeff_xt * vt.f - vs.f) > 1e-12)
        return {false, sched.name() + " posterior mean identity"};
      double pvar = vs.g * vs.g * second.var() / (vt.g * vt.g);
      if (std::abs(post.var - pvar) > 1e-12 * pvar)
        return {false, sched.name() + " posterior variance identity"};
    }
  }
  return {true, "boundaries, derivatives (fd 1e-6), composition and posterior algebra (1e-12)"};
}

Outcome sde_consistency() {
  NoiseSchedule sched = NoiseSchedule::trig();
  double x0 = 0.8;
  std::size_t n_steps = 10000, n_paths = 10000;
  double dt = 1.0 / static_cast<double>(n_steps);
  std::vector<double> drift(n_steps, 0.0), dif(n_steps, 0.0);
  // left-endpoint coefficients; the t = 0 limit is drift 0, diffusion 0
  for (std::size_t k = 1; k < n_steps; ++k) {
    SdeCoefficients c = sde_coefficients(sched, static_cast<double>(k) * dt);
    drift[k] = c.drift_scale * dt;
    dif[k] = c.diffusion * std::sqrt(dt);
  }
  std::vector<std::size_t> marks{2500, 5000, 7500};
  std::vector<std::vector<double>> at(marks.size(), std::vector<double>(n_paths));
  for (std::size_t j = 0; j < n_paths; ++j) {
    RandomStream rs(derive_seed(777, j), kChainStream);
    double x = x0;
    std::size_t mi = 0;
    for (std::size_t k = 1; k < n_steps; ++k) {
      x += drift[k] * x + dif[k] * rs.next_gaussian();
      if (mi < marks.size() && k + 1 == marks[mi]) at[mi++][j] = x;
    }
  }
  std::string detail = "euler-maruyama (1e4 paths, 1e4 steps) vs exact marginals:";
  for (std::size_t mi = 0; mi < marks.size(); ++mi) {
    double t = static_cast<double>(marks[mi]) * dt;
    ScheduleValues sv = sched.eval(t);
    double sum = 0.0, sq = 0.0;
    for (double v : at[mi]) {
      sum += v;
      sq += v * v;
    }
    double n = static_cast<double>(n_paths);
    double mean = sum / n;
    double sd = std::sqrt((sq - sum * sum / n) / (n - 1.0));
    double se = sd / std::sqrt(n);
    if (std::abs(mean - sv.f * x0) > 3.0 * se)
      return {false, "mean off at t=" + std::to_string(t)};
    if (std::abs(sd - sv.g) > 0.02 * sv.g) return {false, "std off at t=" + std::to_string(t)};
    char buf[48];
    std::snprintf(buf, sizeof buf, " t=%.2f ok", t);
    detail += buf;
  }
  return {true, detail + " (mean 3 SE, std 2%)"};
}

Outcome mc_convergence() {
  NoiseSchedule sched = NoiseSchedule::trig();
  std::vector<double> mean0{0.3, -0.2};
  double var0 = 0.25;
  AnalyticGaussianDenoiser model(sched, mean0, var0);
  Dataset data = Dataset::gaussian(mean0, var0);
  Grid grid = Grid::uniform(8);
  std::vector<double> lx, ly;
  for (std::uint64_t n = 32; n <= 4096; n *= 2) {
    double err = 0.0;
    int reps = 5;
    for (int r = 0; r < reps; ++r) {
      CostTable tab = build_table(model, sched, grid, data, n, derive_seed(900 + r, n));
      double sq = 0.0;
      int cnt = 0;
      for (std::size_t t = 1; t <= 8; ++t)
        for (std::size_t s = 0; s < t; ++s) {
          double e = tab.L(t, s) - oracle_loss(sched, grid.time(s), grid.time(t), 2.0, var0);
          sq += e * e;
          ++cnt;
        }
      err += std::sqrt(sq / cnt);
    }
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(err / reps));
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(lx.size());
  my /= static_cast<double>(ly.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    num += (lx[i] - mx) * (ly[i] - my);
    den += (lx[i] - mx) * (lx[i] - mx);
  }
  double slope = num / den;
  char buf[96];
  std::snprintf(buf, sizeof buf, "entry error vs closed form: log-log slope %.3f in [-0.65,-0.35]",
                slope);
  if (slope < -0.65 || slope > -0.35) return {false, buf};
  return {true, buf};
}

Outcome mc_ablation() {
  NoiseSchedule sched = NoiseSchedule::trig();
  std::vector<double> mean0{0.3, -0.2};
  double var0 = 0.25;
  AnalyticGaussianDenoiser model(sched, mean0, var0);
  Dataset data = Dataset::gaussian(mean0, var0);
  Grid grid = Grid::uniform(64);
  std::uint64_t table_seed = derive_seed(1001, "table");
  CostTable small = build_table(model, sched, grid, data, 128, derive_seed(table_seed, 128));
  CostTable big = build_table(model, sched, grid, data, 4096, derive_seed(table_seed, 4096));
  DpTables dp_small = solve_all_budgets(small);
  DpTables dp_big = solve_all_budgets(big);
  std::uint64_t eval_seed = derive_seed(1001, "eval");
  double worst = 0.0;
  for (std::size_t K : {8, 16, 32, 64}) {
    ElboReport a =
        elbo_for_path(model, sched, extract_path(dp_small, grid, K), data, 4096, eval_seed);
    ElboReport b =
        elbo_for_path(model, sched, extract_path(dp_big, grid, K), data, 4096, eval_seed);
    double gap = std::abs(a.total_nats - b.total_nats) / combined_se(a, b);
    if (gap > worst) worst = gap;
    if (gap > 3.0)
      return {false, "128 vs 4096 sample schedules differ by " + std::to_string(gap) +
                         " SE at K=" + std::to_string(K)};
  }
  char buf[96];
  std::snprintf(buf, sizeof buf,
                "128-sample schedules within 3 SE of 4096-sample ones (worst %.2f SE)", worst);
  return {true, buf};
}

Outcome few_step_mlp() {
  fs::path dir = fs::temp_directory_path() / "dpstride_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::path cfg = dir / "run.json";
  {
    std::ofstream os(cfg);
    os << R"({"seed": 20260815, "grid": {"steps": 64},
              "dataset": {"kind": "mixture2d"},
              "model": {"kind": "mlp", "path": ")"
       << (dir / "model.bin").string() << R"("},
              "train": {"steps": 20000},
              "estimate": {"table_samples": 1024, "eval_samples": 2048},
              "budgets": [8, 16, 32, 64]})";
  }
  std::ostringstream out, err;
  if (cli::run({"train", "--config", cfg.string(), "--output-dir", dir.string()}, out, err) != 0)
    return {false, "train failed: " + err.str()};
  if (cli::run({"compare", "--config", cfg.string(), "--output-dir", dir.string()}, out, err) != 0)
    return {false, "compare failed: " + err.str()};

  std::ifstream is(dir / "compare.csv");
  std::string line;
  std::getline(is, line);  // header
  struct Row {
    std::size_t K;
    std::string kind;
    double nats, bpd, se;
  };
  std::vector<Row> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    rows.push_back({std::stoul(cells[0]), cells[1], std::stod(cells[2]), std::stod(cells[3]),
                    std::stod(cells[4])});
  }
  if (rows.size() != 12) return {false, "expected 12 comparison rows, got " + std::to_string(rows.size())};
  double bpd32 = 0.0, bpd64 = 0.0;
  for (std::size_t i = 0; i < rows.size(); i += 3) {
    const Row& dp = rows[i];
    if (dp.kind != "dp") return {false, "row order"};
    for (std::size_t j = 1; j <= 2; ++j) {
      const Row& other = rows[i + j];
      double comb = std::sqrt(dp.se * dp.se + other.se * other.se);
      if (dp.nats > other.nats + 3.0 * comb)
        return {false, "dp worse than " + other.kind + " at K=" + std::to_string(dp.K)};
    }
    if (dp.K == 32) bpd32 = dp.bpd;
    if (dp.K == 64) bpd64 = dp.bpd;
  }
  char buf[128];
  std::snprintf(buf, sizeof buf,
                "trained mlp: dp <= fixed strides at every budget; dp 32->64 gap %.3f bits/dim "
                "(reported only)",
                bpd64 - bpd32);
  return {true, buf};
}

}  // namespace

int main() {
  int failed = 0;
  failed += !check("dp-exactness", 10.0, dp_exactness);
  failed += !check("dp-dominance", 120.0, dp_dominance);
  failed += !check("memoization", 0.0, memoization);
  failed += !check("kernel-identities", 5.0, kernel_identities);
  failed += !check("sde-consistency", 30.0, sde_consistency);
  failed += !check("mc-convergence", 0.0, mc_convergence);
  failed += !check("mc-ablation", 0.0, mc_ablation);
  failed += !check("few-step-mlp", 600.0, few_step_mlp);
  std::printf("acceptance: %d/8 criteria passed\n", 8 - failed);
  return failed == 0 ? 0 : 1;
}
