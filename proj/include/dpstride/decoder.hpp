#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include "dpstride/dataset.hpp"
#include "dpstride/errors.hpp"

namespace dpstride {

enum class DecoderMode {
  // Mass of the Gaussian over the 256-level bin containing x_0; edge bins
  // extend to infinity.
  discretized_256,
  // Plain Gaussian density.
  continuous_gaussian,
};

namespace detail {

inline constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;

// Standard normal CDF. Phi(hi) - Phi(lo) is formed on whichever tail keeps
// the erfc arguments positive, avoiding cancellation between values near 2.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * kInvSqrt2); }

inline double normal_mass(double lo, double hi) {
  if (lo + hi > 0.0)
    return 0.5 * (std::erfc(lo * kInvSqrt2) - std::erfc(hi * kInvSqrt2));
  return 0.5 * (std::erfc(-hi * kInvSqrt2) - std::erfc(-lo * kInvSqrt2));
}

}  // namespace detail

// Negative log-likelihood of x0 under the decoder centered at mean with
// isotropic variance, in nats. Discretized mode requires x0 on the lattice.
inline double decoder_nll(std::span<const double> x0, std::span<const double> mean, double var,
                          DecoderMode mode) {
  if (x0.size() != mean.size()) throw ArgumentError("decoder_nll size mismatch");
  if (!(var > 0.0)) throw DomainError("decoder_nll requires var > 0");
  double nll = 0.0;
  if (mode == DecoderMode::continuous_gaussian) {
    double log_norm = 0.5 * std::log(2.0 * std::numbers::pi * var);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      double diff = x0[i] - mean[i];
      nll += log_norm + diff * diff / (2.0 * var);
    }
    return nll;
  }
  double sd = std::sqrt(var);
  constexpr double half = kLatticeStep / 2.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (!on_lattice(x0[i])) throw DomainError("discretized decoder target off the 256-level lattice");
    double mass;
    if (x0[i] <= -1.0 + half) {
      mass = detail::normal_cdf((x0[i] + half - mean[i]) / sd);
    } else if (x0[i] >= 1.0 - half) {
      mass = detail::normal_cdf(-(x0[i] - half - mean[i]) / sd);
    } else {
      mass = detail::normal_mass((x0[i] - half - mean[i]) / sd, (x0[i] + half - mean[i]) / sd);
    }
    if (mass < 1e-300) mass = 1e-300;  // keep the log finite in far tails
    nll -= std::log(mass);
  }
  return nll;
}

}  // namespace dpstride
