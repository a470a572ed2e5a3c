#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpstride/errors.hpp"
#include "dpstride/kernel.hpp"
#include "dpstride/schedule.hpp"

namespace dpstride {

struct DenoiserOutput {
  std::vector<double> epsilon;
  // Per-dimension (or single shared) interpolation weights in [0,1] for the
  // learned reverse variance. Absent for fixed-variance models.
  std::optional<std::vector<double>> variance_logits;
};

// Process-wide forward pass counter. The table builder promises exactly
// n_samples * T passes; this is how that promise is checked.
inline std::atomic<std::uint64_t> g_forward_passes{0};

inline std::uint64_t forward_pass_count() { return g_forward_passes.load(); }
inline void reset_forward_pass_count() { g_forward_passes.store(0); }

class Denoiser {
public:
  virtual ~Denoiser() = default;

  // One forward pass: predict the noise that produced x_t. t must be in
  // (0,1]; the data itself lives at t = 0 and needs no denoising.
  DenoiserOutput denoise(std::span<const double> x_t, double t) const {
    if (!(t > 0.0 && t <= 1.0)) throw ArgumentError("denoise requires t in (0,1]");
    if (x_t.size() != dim()) throw ArgumentError("denoise input dimension mismatch");
    g_forward_passes.fetch_add(1, std::memory_order_relaxed);
    DenoiserOutput out = run(x_t, t);
    if (out.variance_logits) {
      for (double& v : *out.variance_logits) {
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
      }
    }
    return out;
  }

  virtual std::size_t dim() const = 0;
  virtual bool has_variance_logits() const = 0;

  // Models that know the exact conditional mean E[x_0 | x_t] may provide it.
  // It equals the epsilon-based reconstruction wherever f(t) > 0 but stays
  // finite as f(t) -> 0, where the reconstruction divides by zero.
  virtual std::optional<std::vector<double>> exact_x0(std::span<const double> x_t,
                                                      double t) const {
    (void)x_t;
    (void)t;
    return std::nullopt;
  }

protected:
  virtual DenoiserOutput run(std::span<const double> x_t, double t) const = 0;
};

// Reconstruct x_0 from an existing forward pass output. With clipping the
// result is clamped to [-1,1]; at a singular f(t) the clipped reconstruction
// degenerates to the sign of the numerator (its limit), while the unclipped
// one has no finite value and raises instead.
inline std::vector<double> x0_from_epsilon(const Denoiser& model, std::span<const double> x_t,
                                           std::span<const double> epsilon,
                                           const ScheduleValues& sv, double t, bool clip) {
  std::vector<double> out(x_t.size());
  if (auto exact = model.exact_x0(x_t, t)) {
    out = std::move(*exact);
  } else if (sv.f < kSingularF) {
    if (!clip) throw SingularityError("x0 reconstruction at t with f(t) < 1e-12 requires clipping");
    for (std::size_t i = 0; i < out.size(); ++i) {
      double num = x_t[i] - sv.g * epsilon[i];
      out[i] = num > 0.0 ? 1.0 : (num < 0.0 ? -1.0 : 0.0);
    }
    return out;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (x_t[i] - sv.g * epsilon[i]) / sv.f;
  }
  if (clip) {
    for (double& v : out) {
      if (v < -1.0) v = -1.0;
      if (v > 1.0) v = 1.0;
    }
  }
  return out;
}

// One forward pass plus reconstruction.
inline std::vector<double> predict_x0(const Denoiser& model, std::span<const double> x_t,
                                      double t, const NoiseSchedule& sched, bool clip) {
  DenoiserOutput out = model.denoise(x_t, t);
  return x0_from_epsilon(model, x_t, out.epsilon, sched.eval(t), t, clip);
}

// Closed-form denoiser for x_0 ~ N(mean, var I). Returns the posterior mean
// of x_0 given x_t exactly, which also defines its noise prediction.
class AnalyticGaussianDenoiser : public Denoiser {
public:
  AnalyticGaussianDenoiser(NoiseSchedule sched, std::vector<double> mean, double var)
      : sched_(std::move(sched)), mean_(std::move(mean)), var_(var) {
    if (mean_.empty()) throw ArgumentError("analytic denoiser needs a non-empty mean");
    if (!(var_ >= 0.0)) throw ArgumentError("analytic denoiser needs var >= 0");
  }

  std::size_t dim() const override { return mean_.size(); }
  bool has_variance_logits() const override { return false; }

  std::optional<std::vector<double>> exact_x0(std::span<const double> x_t,
                                              double t) const override {
    ScheduleValues v = sched_.eval(t);
    double marginal = v.f * v.f * var_ + v.g * v.g;
    double gain = v.f * var_ / marginal;
    std::vector<double> out(mean_.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = mean_[i] + gain * (x_t[i] - v.f * mean_[i]);
    return out;
  }

protected:
  DenoiserOutput run(std::span<const double> x_t, double t) const override {
    ScheduleValues v = sched_.eval(t);
    if (!(v.g > 0.0)) throw ScheduleError("analytic denoiser needs g(t) > 0");
    std::vector<double> x0 = *exact_x0(x_t, t);
    DenoiserOutput out;
    out.epsilon.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i)
      out.epsilon[i] = (x_t[i] - v.f * x0[i]) / v.g;
    return out;
  }

private:
  NoiseSchedule sched_;
  std::vector<double> mean_;
  double var_;
};

}  // namespace dpstride
