#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "dpstride/dataset.hpp"
#include "dpstride/decoder.hpp"
#include "dpstride/denoiser.hpp"
#include "dpstride/dp.hpp"
#include "dpstride/errors.hpp"
#include "dpstride/kernel.hpp"
#include "dpstride/matrix.hpp"
#include "dpstride/parallel.hpp"
#include "dpstride/random.hpp"
#include "dpstride/table.hpp"

namespace dpstride {

struct PerTransition {
  double s = 0.0;
  double t = 0.0;
  double nats = 0.0;
};

struct ElboReport {
  double total_nats = 0.0;
  double bits_per_dim = 0.0;
  double prior_nats = 0.0;
  double standard_error = 0.0;  // of total_nats, over evaluation samples
  std::uint64_t n_samples = 0;
  std::vector<PerTransition> per_transition;
};

struct EvalOptions {
  VarianceMode variance_mode = VarianceMode::fixed_posterior;
  DecoderMode decoder_mode = DecoderMode::continuous_gaussian;
  bool clip_x0 = false;
  int n_threads = 0;
};

namespace detail {

struct EvalPartial {
  std::vector<double> per_transition_sum;
  double total_sum = 0.0;
  double total_sumsq = 0.0;
  double prior_sum = 0.0;
};

inline double prior_mismatch(const NoiseSchedule& sched, std::span<const double> x0) {
  ScheduleValues v1 = sched.eval(1.0);
  std::vector<double> end_mean(x0.size());
  for (std::size_t j = 0; j < x0.size(); ++j) end_mean[j] = v1.f * x0[j];
  std::vector<double> origin(x0.size(), 0.0);
  return kl_diag_gaussian(end_mean, v1.g * v1.g, origin, 1.0);
}

template <typename PerSample>
ElboReport reduce_elbo(std::size_t K, std::uint64_t n_samples, std::uint32_t dim, int n_threads,
                       PerSample&& per_sample) {
  auto parts = map_chunks<EvalPartial>(n_samples, n_threads,
      [&](std::uint64_t, std::uint64_t begin, std::uint64_t end, EvalPartial& p) {
        p.per_transition_sum.assign(K, 0.0);
        std::vector<double> contrib(K);
        for (std::uint64_t j = begin; j < end; ++j) {
          double prior = per_sample(j, contrib);
          double total = 0.0;
          for (std::size_t i = 0; i < K; ++i) {
            p.per_transition_sum[i] += contrib[i];
            total += contrib[i];
          }
          total += prior;
          p.prior_sum += prior;
          p.total_sum += total;
          p.total_sumsq += total * total;
        }
      });
  EvalPartial total = pairwise_reduce(std::move(parts), [&](EvalPartial& a, const EvalPartial& b) {
    for (std::size_t i = 0; i < K; ++i) a.per_transition_sum[i] += b.per_transition_sum[i];
    a.total_sum += b.total_sum;
    a.total_sumsq += b.total_sumsq;
    a.prior_sum += b.prior_sum;
  });
  ElboReport report;
  report.n_samples = n_samples;
  double n = static_cast<double>(n_samples);
  report.prior_nats = total.prior_sum / n;
  report.per_transition.resize(K);
  double folded = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    report.per_transition[i].nats = total.per_transition_sum[i] / n;
    folded += report.per_transition[i].nats;
  }
  report.total_nats = folded + report.prior_nats;
  report.bits_per_dim = report.total_nats / (static_cast<double>(dim) * std::numbers::ln2);
  if (n_samples > 1) {
    double var = (total.total_sumsq - total.total_sum * total.total_sum / n) / (n - 1.0);
    if (var < 0.0) var = 0.0;
    report.standard_error = std::sqrt(var / n);
  }
  return report;
}

}  // namespace detail

// Monte Carlo estimate of the variational bound along a path, with fresh
// data and noise draws. Samples are keyed by (seed, index), so two
// evaluations with the same seed share data points transition-for-transition
// and are paired estimators.
inline ElboReport elbo_for_path(const Denoiser& model, const NoiseSchedule& sched,
                                const StridePath& path, const Dataset& data,
                                std::uint64_t n_samples, std::uint64_t seed,
                                const EvalOptions& opts = {}) {
  if (n_samples == 0) throw ArgumentError("elbo_for_path needs n_samples >= 1");
  if (model.dim() != data.dim()) throw ValidationError("model and dataset dimension mismatch");
  if (opts.variance_mode == VarianceMode::interpolated && !model.has_variance_logits())
    throw ValidationError("interpolated variance needs a model with variance logits");
  std::size_t K = path.K();
  if (K < 1) throw ArgumentError("path has no transitions");
  std::size_t d = data.dim();

  ElboReport report = detail::reduce_elbo(
      K, n_samples, static_cast<std::uint32_t>(d), opts.n_threads,
      [&](std::uint64_t j, std::vector<double>& contrib) {
        std::uint64_t sample_seed = derive_seed(seed, j);
        RandomStream data_stream(sample_seed, kDataStream);
        std::vector<double> x0(d);
        data.sample(data_stream, x0);
        RandomStream noise(sample_seed, kEvalNoiseStream);
        std::vector<double> x_t(d), x0_hat(d), mean_q(d), mean_p(d);
        for (std::size_t i = 1; i <= K; ++i) {
          double t = path.times[i];
          double s = path.times[i - 1];
          ScheduleValues sv = sched.eval(t);
          for (std::size_t c = 0; c < d; ++c)
            x_t[c] = sv.f * x0[c] + sv.g * noise.next_gaussian();
          DenoiserOutput out = model.denoise(x_t, t);
          x0_hat = x0_from_epsilon(model, x_t, out.epsilon, sv, t, opts.clip_x0);
          if (s == 0.0) {
            contrib[i - 1] = decoder_nll(x0, x0_hat, sv.g * sv.g, opts.decoder_mode);
            continue;
          }
          PosteriorParams post = posterior(sched, s, t);
          for (std::size_t c = 0; c < d; ++c) {
            mean_q[c] = post.coeff_x0 * x0[c] + post.coeff_xt * x_t[c];
            mean_p[c] = post.coeff_x0 * x0_hat[c] + post.coeff_xt * x_t[c];
          }
          if (opts.variance_mode == VarianceMode::fixed_posterior) {
            contrib[i - 1] = kl_diag_gaussian(mean_q, post.var, mean_p, post.var);
          } else {
            if (!out.variance_logits)
              throw ValidationError("interpolated variance needs a model with variance logits");
            double tvar = transition(sched, s, t).var();
            const auto& w = *out.variance_logits;
            std::vector<double> var_p(d);
            for (std::size_t c = 0; c < d; ++c)
              var_p[c] = interpolate_variance(w.size() == 1 ? w[0] : w[c], tvar, post.var);
            contrib[i - 1] = kl_diag_gaussian(mean_q, post.var, mean_p, var_p);
          }
        }
        return detail::prior_mismatch(sched, x0);
      });
  for (std::size_t i = 0; i < K; ++i) {
    report.per_transition[i].s = path.times[i];
    report.per_transition[i].t = path.times[i + 1];
  }
  return report;
}

// Re-evaluates a path on the exact draws that built the table. Per-transition
// means are bit-identical to the table entries, and total_nats equals the
// path cost plus the stored endpoint term.
inline ElboReport elbo_for_path_replay(const Denoiser& model, const NoiseSchedule& sched,
                                       const StridePath& path, const Dataset& data,
                                       const CostTable& table, int n_threads = 0) {
  validate_table_model(table, model);
  if (model.dim() != data.dim()) throw ValidationError("model and dataset dimension mismatch");
  if (sched.name() != table.schedule_name)
    throw ValidationError("table was built with schedule '" + table.schedule_name + "'");
  std::size_t K = path.K();
  if (K < 1) throw ArgumentError("path has no transitions");
  for (std::size_t i = 0; i < path.indices.size(); ++i) {
    if (path.indices[i] > table.grid.T() || table.grid.time(path.indices[i]) != path.times[i])
      throw ValidationError("path does not lie on the table grid");
  }
  std::size_t d = data.dim();

  ElboReport report = detail::reduce_elbo(
      K, table.mc_samples, table.dim, n_threads,
      [&](std::uint64_t j, std::vector<double>& contrib) {
        std::uint64_t sample_seed = derive_seed(table.seed, j);
        RandomStream data_stream(sample_seed, kDataStream);
        std::vector<double> x0(d);
        data.sample(data_stream, x0);
        for (std::size_t i = 1; i <= K; ++i) {
          std::size_t t_idx = path.indices[i];
          detail::RowContext ctx = detail::make_row_context(model, sched, table.grid, t_idx, x0,
                                                            sample_seed, table.clip_x0);
          contrib[i - 1] = detail::jump_loss(ctx, sched, table.grid.time(path.indices[i - 1]), x0,
                                             table.variance_mode, table.decoder_mode);
        }
        return detail::prior_mismatch(sched, x0);
      });
  for (std::size_t i = 0; i < K; ++i) {
    report.per_transition[i].s = path.times[i];
    report.per_transition[i].t = path.times[i + 1];
  }
  return report;
}

// Draws n chains along the path: start from the t = 1 marginal N(0, I), step
// through each reverse transition, and emit the decoder mean at the end
// (snapped to the lattice in discretized mode). Exactly K forward passes per
// chain; chain j depends only on (seed, j).
inline MatrixD ancestral_sample(const Denoiser& model, const NoiseSchedule& sched,
                                const StridePath& path, std::uint64_t n_chains,
                                std::uint64_t seed, const EvalOptions& opts = {}) {
  if (n_chains == 0) throw ArgumentError("ancestral_sample needs n_chains >= 1");
  std::size_t K = path.K();
  if (K < 1) throw ArgumentError("path has no transitions");
  if (opts.variance_mode == VarianceMode::interpolated && !model.has_variance_logits())
    throw ValidationError("interpolated variance needs a model with variance logits");
  std::size_t d = model.dim();
  MatrixD out(n_chains, d);
  struct None {};
  map_chunks<None>(n_chains, opts.n_threads,
      [&](std::uint64_t, std::uint64_t begin, std::uint64_t end, None&) {
        std::vector<double> x(d), x0_hat(d);
        for (std::uint64_t j = begin; j < end; ++j) {
          RandomStream rs(derive_seed(seed, j), kChainStream);
          for (std::size_t c = 0; c < d; ++c) x[c] = rs.next_gaussian();
          for (std::size_t i = K; i >= 1; --i) {
            double t = path.times[i];
            double s = path.times[i - 1];
            ScheduleValues sv = sched.eval(t);
            DenoiserOutput o = model.denoise(x, t);
            x0_hat = x0_from_epsilon(model, x, o.epsilon, sv, t, opts.clip_x0);
            if (i == 1) break;  // s may be 0 only at the last step
            PosteriorParams post = posterior(sched, s, t);
            if (opts.variance_mode == VarianceMode::interpolated && !o.variance_logits)
              throw ValidationError("interpolated variance needs a model with variance logits");
            double tvar = opts.variance_mode == VarianceMode::interpolated
                              ? transition(sched, s, t).var()
                              : 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              double var = post.var;
              if (opts.variance_mode == VarianceMode::interpolated) {
                const auto& w = *o.variance_logits;
                var = interpolate_variance(w.size() == 1 ? w[0] : w[c], tvar, post.var);
              }
              if (!(var > 0.0)) throw ScheduleError("non-positive reverse step variance");
              x[c] = post.coeff_x0 * x0_hat[c] + post.coeff_xt * x[c] +
                     std::sqrt(var) * rs.next_gaussian();
            }
          }
          for (std::size_t c = 0; c < d; ++c)
            out(j, c) = opts.decoder_mode == DecoderMode::discretized_256
                            ? quantize_to_lattice(x0_hat[c])
                            : x0_hat[c];
        }
      });
  return out;
}

}  // namespace dpstride
