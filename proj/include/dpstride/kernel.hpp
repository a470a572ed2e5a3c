#pragma once

#include <cmath>
#include <span>

#include "dpstride/errors.hpp"
#include "dpstride/schedule.hpp"

namespace dpstride {

// Below this signal scale a division by f is treated as singular.
inline constexpr double kSingularF = 1e-12;

// Conditional x_t | x_s ~ N(scale * x_s, std^2 I) for s <= t.
struct TransitionParams {
  double scale = 1.0;
  double std = 0.0;
  double var() const { return std * std; }
};

// Conditional x_s | x_t, x_0 ~ N(coeff_x0 * x_0 + coeff_xt * x_t, var I)
// for 0 < s < t.
struct PosteriorParams {
  double coeff_x0 = 0.0;
  double coeff_xt = 0.0;
  double var = 0.0;
};

// Forward SDE dX = drift_scale * X dt + diffusion dW whose marginals match
// the schedule.
struct SdeCoefficients {
  double drift_scale = 0.0;
  double diffusion = 0.0;
};

inline TransitionParams transition(const NoiseSchedule& sched, double s, double t) {
  if (!(s >= 0.0 && t <= 1.0)) throw DomainError("transition times outside [0,1]");
  if (s > t) throw ArgumentError("transition requires s <= t");
  if (s == t) return {1.0, 0.0};
  ScheduleValues vs = sched.eval(s);
  ScheduleValues vt = sched.eval(t);
  if (vs.f < kSingularF) throw SingularityError("transition from s with f(s) < 1e-12");
  double scale = vt.f / vs.f;
  double var = vt.g * vt.g - scale * scale * vs.g * vs.g;
  // A valid schedule keeps this non-negative; allow rounding noise only.
  if (var < -1e-12 * std::max(1.0, vt.g * vt.g))
    throw ScheduleError("negative transition variance: schedule is not valid");
  if (var < 0.0) var = 0.0;
  return {scale, std::sqrt(var)};
}

inline PosteriorParams posterior(const NoiseSchedule& sched, double s, double t) {
  if (!(s > 0.0)) throw ArgumentError("posterior requires s > 0; the decoder handles s = 0");
  if (!(s < t)) throw ArgumentError("posterior requires s < t");
  if (!(t <= 1.0)) throw DomainError("posterior time outside [0,1]");
  ScheduleValues vs = sched.eval(s);
  ScheduleValues vt = sched.eval(t);
  TransitionParams ts = transition(sched, s, t);
  double var_t = vt.g * vt.g;
  if (var_t <= 0.0) throw SingularityError("posterior at t with g(t) = 0");
  double var_s = vs.g * vs.g;
  double tvar = ts.var();
  return {vs.f * tvar / var_t, ts.scale * var_s / var_t, var_s * tvar / var_t};
}

inline SdeCoefficients sde_coefficients(const NoiseSchedule& sched, double t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("sde coefficients defined on open (0,1)");
  ScheduleValues v = sched.eval(t);
  if (v.f < kSingularF) throw SingularityError("sde coefficients at t with f(t) < 1e-12");
  double drift = v.df / v.f;
  double diff2 = 2.0 * v.g * (v.dg - drift * v.g);
  if (diff2 < -1e-9 * std::max(1.0, 2.0 * v.g * std::abs(v.dg)))
    throw ScheduleError("negative squared diffusion: schedule is not valid");
  if (diff2 < 0.0) diff2 = 0.0;
  return {drift, std::sqrt(diff2)};
}

// KL(N(mean1, var1 I) || N(mean2, var2 I)) in nats, isotropic covariances.
inline double kl_diag_gaussian(std::span<const double> mean1, double var1,
                               std::span<const double> mean2, double var2) {
  if (mean1.size() != mean2.size()) throw ArgumentError("kl_diag_gaussian mean size mismatch");
  if (!(var1 > 0.0) || !(var2 > 0.0)) throw DomainError("kl_diag_gaussian requires positive variances");
  // Accumulated per dimension, in the same order as the per-dimension
  // overload, so a constant var2 vector gives a bit-identical result.
  double acc = 0.0;
  for (std::size_t i = 0; i < mean1.size(); ++i) {
    double diff = mean1[i] - mean2[i];
    acc += 0.5 * std::log(var2 / var1) + var1 / (2.0 * var2) - 0.5 +
           diff * diff / (2.0 * var2);
  }
  return acc;
}

// Overload with per-dimension var2 (isotropic reference, diagonal approximant).
inline double kl_diag_gaussian(std::span<const double> mean1, double var1,
                               std::span<const double> mean2, std::span<const double> var2) {
  if (mean1.size() != mean2.size() || mean1.size() != var2.size())
    throw ArgumentError("kl_diag_gaussian size mismatch");
  if (!(var1 > 0.0)) throw DomainError("kl_diag_gaussian requires positive variances");
  double acc = 0.0;
  for (std::size_t i = 0; i < mean1.size(); ++i) {
    if (!(var2[i] > 0.0)) throw DomainError("kl_diag_gaussian requires positive variances");
    double diff = mean1[i] - mean2[i];
    acc += 0.5 * std::log(var2[i] / var1) + var1 / (2.0 * var2[i]) - 0.5 +
           diff * diff / (2.0 * var2[i]);
  }
  return acc;
}

}  // namespace dpstride
