#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpstride/dataset.hpp"
#include "dpstride/decoder.hpp"
#include "dpstride/denoiser.hpp"
#include "dpstride/errors.hpp"
#include "dpstride/io.hpp"
#include "dpstride/kernel.hpp"
#include "dpstride/matrix.hpp"
#include "dpstride/parallel.hpp"
#include "dpstride/random.hpp"
#include "dpstride/schedule.hpp"

namespace dpstride {

// Discretization of [0,1] used for both table building and path search.
// Grid index i corresponds to time times[i]; index 0 must be exactly 0 and
// the last index exactly 1.
class Grid {
public:
  explicit Grid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw ArgumentError("grid needs at least 2 points");
    if (times_.front() != 0.0 || times_.back() != 1.0)
      throw ArgumentError("grid endpoints must be exactly 0 and 1");
    for (std::size_t i = 0; i + 1 < times_.size(); ++i)
      if (!(times_[i] < times_[i + 1])) throw ArgumentError("grid times must be strictly increasing");
  }

  static Grid uniform(std::size_t T) {
    if (T < 1) throw ArgumentError("grid needs T >= 1");
    std::vector<double> times(T + 1);
    for (std::size_t i = 0; i <= T; ++i) times[i] = static_cast<double>(i) / static_cast<double>(T);
    return Grid(std::move(times));
  }

  std::size_t T() const { return times_.size() - 1; }
  double time(std::size_t idx) const { return times_[idx]; }
  const std::vector<double>& times() const { return times_; }

  bool operator==(const Grid&) const = default;

private:
  std::vector<double> times_;
};

enum class VarianceMode {
  fixed_posterior,  // reverse variance = forward posterior variance
  interpolated,     // log-space blend between posterior and transition variance
};

// Learned blend between the posterior variance (weight 0) and the full
// transition variance (weight 1). Endpoints short-circuit so that weight 0
// is bit-identical to the fixed-posterior mode.
inline double interpolate_variance(double weight, double transition_var, double posterior_var) {
  if (weight <= 0.0) return posterior_var;
  if (weight >= 1.0) return transition_var;
  return std::exp(weight * std::log(transition_var) + (1.0 - weight) * std::log(posterior_var));
}

// Monte Carlo estimates of the per-transition loss. L(t_idx, s_idx) is the
// expected cost of jumping from grid index t_idx down to s_idx: a KL term
// for s_idx > 0 and the decoder NLL for s_idx = 0. Entries with s >= t are
// +infinity. var holds the per-entry sample variance of the estimates.
struct CostTable {
  Grid grid{Grid::uniform(1)};
  MatrixD L;
  MatrixD var;
  double prior_term = 0.0;  // mismatch between the t=1 marginal and N(0,I)
  std::uint64_t mc_samples = 0;
  std::uint64_t seed = 0;
  VarianceMode variance_mode = VarianceMode::fixed_posterior;
  DecoderMode decoder_mode = DecoderMode::continuous_gaussian;
  bool clip_x0 = false;
  std::uint32_t dim = 0;
  std::string schedule_name;
};

namespace detail {

// Everything derived from the single forward pass at (x_0, t_idx): the
// corrupted input, the model reconstruction, and optional variance weights.
// One context serves every destination s_idx < t_idx.
struct RowContext {
  double t = 0.0;
  ScheduleValues sv;
  std::vector<double> x_t;
  std::vector<double> x0_hat;
  std::optional<std::vector<double>> logits;
};

inline RowContext make_row_context(const Denoiser& model, const NoiseSchedule& sched,
                                   const Grid& grid, std::size_t t_idx,
                                   std::span<const double> x0, std::uint64_t sample_seed,
                                   bool clip_x0) {
  if (t_idx < 1 || t_idx > grid.T()) throw ArgumentError("row index out of range");
  RowContext ctx;
  ctx.t = grid.time(t_idx);
  ctx.sv = sched.eval(ctx.t);
  std::size_t d = x0.size();
  ctx.x_t.resize(d);
  RandomStream noise(sample_seed, kNoiseStreamBase + t_idx);
  for (std::size_t i = 0; i < d; ++i)
    ctx.x_t[i] = ctx.sv.f * x0[i] + ctx.sv.g * noise.next_gaussian();
  DenoiserOutput out = model.denoise(ctx.x_t, ctx.t);
  ctx.x0_hat = x0_from_epsilon(model, ctx.x_t, out.epsilon, ctx.sv, ctx.t, clip_x0);
  ctx.logits = std::move(out.variance_logits);
  return ctx;
}

// Loss contribution of the jump from the context's t down to time s (grid
// value), for the given data point. s = 0 is the decoder term.
inline double jump_loss(const RowContext& ctx, const NoiseSchedule& sched, double s,
                        std::span<const double> x0, VarianceMode vmode, DecoderMode dmode) {
  std::size_t d = x0.size();
  if (s == 0.0) return decoder_nll(x0, ctx.x0_hat, ctx.sv.g * ctx.sv.g, dmode);
  PosteriorParams post = posterior(sched, s, ctx.t);
  std::vector<double> mean_q(d), mean_p(d);
  for (std::size_t i = 0; i < d; ++i) {
    mean_q[i] = post.coeff_x0 * x0[i] + post.coeff_xt * ctx.x_t[i];
    mean_p[i] = post.coeff_x0 * ctx.x0_hat[i] + post.coeff_xt * ctx.x_t[i];
  }
  if (vmode == VarianceMode::fixed_posterior)
    return kl_diag_gaussian(mean_q, post.var, mean_p, post.var);
  if (!ctx.logits) throw ValidationError("interpolated variance needs a model with variance logits");
  double tvar = transition(sched, s, ctx.t).var();
  std::vector<double> var_p(d);
  const auto& w = *ctx.logits;
  for (std::size_t i = 0; i < d; ++i)
    var_p[i] = interpolate_variance(w.size() == 1 ? w[0] : w[i], tvar, post.var);
  return kl_diag_gaussian(mean_q, post.var, mean_p, var_p);
}

}  // namespace detail

// All losses reachable from grid index t_idx for one data point, using one
// forward pass. Returns entries for s_idx = 0 .. t_idx-1.
inline std::vector<double> build_row(const Denoiser& model, const NoiseSchedule& sched,
                                     const Grid& grid, std::size_t t_idx,
                                     std::span<const double> x0, std::uint64_t sample_seed,
                                     VarianceMode vmode, DecoderMode dmode, bool clip_x0) {
  detail::RowContext ctx = detail::make_row_context(model, sched, grid, t_idx, x0, sample_seed, clip_x0);
  std::vector<double> row(t_idx);
  for (std::size_t s_idx = 0; s_idx < t_idx; ++s_idx)
    row[s_idx] = detail::jump_loss(ctx, sched, grid.time(s_idx), x0, vmode, dmode);
  return row;
}

struct BuildOptions {
  VarianceMode variance_mode = VarianceMode::fixed_posterior;
  DecoderMode decoder_mode = DecoderMode::continuous_gaussian;
  bool clip_x0 = false;
  int n_threads = 0;  // 0 = hardware concurrency
};

// Monte Carlo cost table over the full grid: n_samples data points, one
// noise draw per (sample, t_idx), exactly n_samples * T forward passes.
// Accumulation is chunked and merged pairwise, so the result is bit-identical
// for any thread count.
inline CostTable build_table(const Denoiser& model, const NoiseSchedule& sched, const Grid& grid,
                             const Dataset& data, std::uint64_t n_samples, std::uint64_t seed,
                             const BuildOptions& opts = {}) {
  if (n_samples == 0) throw ArgumentError("build_table needs n_samples >= 1");
  if (model.dim() != data.dim()) throw ValidationError("model and dataset dimension mismatch");
  if (opts.variance_mode == VarianceMode::interpolated && !model.has_variance_logits())
    throw ValidationError("interpolated variance needs a model with variance logits");
  std::size_t T = grid.T();
  std::size_t d = data.dim();
  std::size_t cells = (T + 1) * (T + 1);

  struct Partial {
    std::vector<double> sum, sumsq;
    double prior_sum = 0.0, prior_sumsq = 0.0;
  };
  auto parts = map_chunks<Partial>(n_samples, opts.n_threads,
      [&](std::uint64_t, std::uint64_t begin, std::uint64_t end, Partial& p) {
        p.sum.assign(cells, 0.0);
        p.sumsq.assign(cells, 0.0);
        std::vector<double> x0(d);
        for (std::uint64_t i = begin; i < end; ++i) {
          std::uint64_t sample_seed = derive_seed(seed, i);
          RandomStream data_stream(sample_seed, kDataStream);
          data.sample(data_stream, x0);
          ScheduleValues v1 = sched.eval(1.0);
          std::vector<double> end_mean(d);
          for (std::size_t j = 0; j < d; ++j) end_mean[j] = v1.f * x0[j];
          std::vector<double> origin(d, 0.0);
          double prior = kl_diag_gaussian(end_mean, v1.g * v1.g, origin, 1.0);
          p.prior_sum += prior;
          p.prior_sumsq += prior * prior;
          for (std::size_t t_idx = 1; t_idx <= T; ++t_idx) {
            std::vector<double> row = build_row(model, sched, grid, t_idx, x0, sample_seed,
                                                opts.variance_mode, opts.decoder_mode, opts.clip_x0);
            for (std::size_t s_idx = 0; s_idx < t_idx; ++s_idx) {
              double v = row[s_idx];
              p.sum[t_idx * (T + 1) + s_idx] += v;
              p.sumsq[t_idx * (T + 1) + s_idx] += v * v;
            }
          }
        }
      });
  Partial total = pairwise_reduce(std::move(parts), [&](Partial& a, const Partial& b) {
    for (std::size_t i = 0; i < cells; ++i) {
      a.sum[i] += b.sum[i];
      a.sumsq[i] += b.sumsq[i];
    }
    a.prior_sum += b.prior_sum;
    a.prior_sumsq += b.prior_sumsq;
  });

  CostTable table;
  table.grid = grid;
  double inf = std::numeric_limits<double>::infinity();
  double n = static_cast<double>(n_samples);
  table.L = MatrixD(T + 1, T + 1, inf);
  table.var = MatrixD(T + 1, T + 1, 0.0);
  for (std::size_t t_idx = 1; t_idx <= T; ++t_idx) {
    for (std::size_t s_idx = 0; s_idx < t_idx; ++s_idx) {
      double sum = total.sum[t_idx * (T + 1) + s_idx];
      double sumsq = total.sumsq[t_idx * (T + 1) + s_idx];
      table.L(t_idx, s_idx) = sum / n;
      if (n_samples > 1) {
        double ss = (sumsq - sum * sum / n) / (n - 1.0);
        table.var(t_idx, s_idx) = ss > 0.0 ? ss : 0.0;
      }
    }
  }
  table.prior_term = total.prior_sum / n;
  table.mc_samples = n_samples;
  table.seed = seed;
  table.variance_mode = opts.variance_mode;
  table.decoder_mode = opts.decoder_mode;
  table.clip_x0 = opts.clip_x0;
  table.dim = static_cast<std::uint32_t>(d);
  table.schedule_name = sched.name();
  return table;
}

// Rejects model/table pairings that cannot reproduce the table's losses.
inline void validate_table_model(const CostTable& table, const Denoiser& model) {
  if (table.dim != model.dim()) throw ValidationError("table and model dimension mismatch");
  if (table.variance_mode == VarianceMode::interpolated && !model.has_variance_logits())
    throw ValidationError("table was built with interpolated variance but model has no variance logits");
}

inline void save_table(const CostTable& table, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileFormatError("cannot open table file for writing: " + path.string());
  os.write("DPST", 4);
  write_u32(os, 1);  // version
  std::size_t T = table.grid.T();
  write_u32(os, static_cast<std::uint32_t>(T));
  write_u64(os, table.mc_samples);
  write_u64(os, table.seed);
  write_str(os, table.schedule_name);
  write_u32(os, table.variance_mode == VarianceMode::interpolated ? 1 : 0);
  write_u32(os, table.decoder_mode == DecoderMode::discretized_256 ? 1 : 0);
  write_u8(os, table.clip_x0 ? 1 : 0);
  write_u32(os, table.dim);
  for (double t : table.grid.times()) write_f64(os, t);
  for (double v : table.L.data()) write_f64(os, v);
  for (double v : table.var.data()) write_f64(os, v);
  write_f64(os, table.prior_term);
  if (!os) throw FileFormatError("failed writing table file: " + path.string());
}

inline CostTable load_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileFormatError("cannot open table file: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DPST")
    throw FileFormatError("not a cost table file (bad magic)");
  if (read_u32(is) != 1) throw FileFormatError("unsupported table file version");
  std::uint32_t T = read_u32(is);
  if (T < 1 || T > (1u << 20)) throw FileFormatError("table size out of range");
  CostTable table;
  table.mc_samples = read_u64(is);
  table.seed = read_u64(is);
  table.schedule_name = read_str(is, 256);
  std::uint32_t vmode = read_u32(is);
  std::uint32_t dmode = read_u32(is);
  if (vmode > 1 || dmode > 1) throw FileFormatError("table file enum out of range");
  table.variance_mode = vmode ? VarianceMode::interpolated : VarianceMode::fixed_posterior;
  table.decoder_mode = dmode ? DecoderMode::discretized_256 : DecoderMode::continuous_gaussian;
  table.clip_x0 = read_u8(is) != 0;
  table.dim = read_u32(is);
  std::vector<double> times(T + 1);
  for (auto& t : times) t = read_f64(is);
  try {
    table.grid = Grid(std::move(times));
  } catch (const ArgumentError& e) {
    throw FileFormatError(std::string("table grid invalid: ") + e.what());
  }
  table.L = MatrixD(T + 1, T + 1);
  table.var = MatrixD(T + 1, T + 1);
  for (auto& v : table.L.data()) v = read_f64(is);
  for (auto& v : table.var.data()) v = read_f64(is);
  table.prior_term = read_f64(is);
  is.peek();
  if (!is.eof()) throw FileFormatError("trailing bytes in table file");
  return table;
}

}  // namespace dpstride
