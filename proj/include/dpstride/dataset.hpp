#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "dpstride/errors.hpp"
#include "dpstride/random.hpp"

namespace dpstride {

// 256 evenly spaced levels on [-1,1], the support of the discretized decoder.
inline constexpr double kLatticeStep = 2.0 / 255.0;

inline double quantize_to_lattice(double x) {
  if (x < -1.0) x = -1.0;
  if (x > 1.0) x = 1.0;
  double k = std::floor((x + 1.0) * 127.5 + 0.5);
  if (k < 0.0) k = 0.0;
  if (k > 255.0) k = 255.0;
  return -1.0 + k * kLatticeStep;
}

inline bool on_lattice(double x, double tol = 1e-9) {
  if (x < -1.0 - tol || x > 1.0 + tol) return false;
  double k = (x + 1.0) * 127.5;
  return std::abs(k - std::floor(k + 0.5)) <= tol * 127.5;
}

struct MixtureComponent {
  double weight = 1.0;
  std::vector<double> mean;
  double var = 0.01;
};

// Synthetic data distributions. Draws are a pure function of the stream, so
// the same (seed, sample index) always yields the same point.
class Dataset {
public:
  static Dataset gaussian(std::vector<double> mean, double var) {
    if (mean.empty()) throw ArgumentError("gaussian dataset needs a non-empty mean");
    if (!(var >= 0.0)) throw ArgumentError("gaussian dataset needs var >= 0");
    Dataset d(Kind::gaussian, mean.size());
    d.mean_ = std::move(mean);
    d.var_ = var;
    return d;
  }

  static Dataset mixture2d(std::vector<MixtureComponent> comps) {
    if (comps.empty()) throw ArgumentError("mixture dataset needs at least one component");
    double total = 0.0;
    for (const auto& c : comps) {
      if (c.mean.size() != 2) throw ArgumentError("mixture components must be 2-dimensional");
      if (!(c.weight > 0.0) || !(c.var > 0.0))
        throw ArgumentError("mixture components need positive weight and variance");
      total += c.weight;
    }
    Dataset d(Kind::mixture2d, 2);
    d.comps_ = std::move(comps);
    for (auto& c : d.comps_) c.weight /= total;
    return d;
  }

  // Four well-separated bumps in [-1,1]^2.
  static Dataset default_mixture2d() {
    std::vector<MixtureComponent> comps;
    for (double sy : {1.0, -1.0})
      for (double sx : {1.0, -1.0})
        comps.push_back({sx * sy > 0 ? 0.3 : 0.2, {0.55 * sx, 0.55 * sy}, 0.01});
    return mixture2d(std::move(comps));
  }

  static Dataset ring2d(double radius, double noise_std) {
    if (!(radius > 0.0) || !(noise_std >= 0.0)) throw ArgumentError("ring dataset needs radius > 0, noise >= 0");
    Dataset d(Kind::ring2d, 2);
    d.radius_ = radius;
    d.noise_std_ = noise_std;
    return d;
  }

  std::size_t dim() const { return dim_; }

  // Snap draws to the decoder lattice (used with the discretized decoder,
  // whose likelihood is only defined on lattice points).
  void set_quantized(bool q) { quantized_ = q; }
  bool quantized() const { return quantized_; }

  void sample(RandomStream& rs, std::span<double> out) const {
    if (out.size() != dim_) throw ArgumentError("dataset sample buffer size mismatch");
    switch (kind_) {
      case Kind::gaussian: {
        double sd = std::sqrt(var_);
        for (std::size_t i = 0; i < dim_; ++i) out[i] = mean_[i] + sd * rs.next_gaussian();
        break;
      }
      case Kind::mixture2d: {
        double u = rs.next_uniform();
        const MixtureComponent* pick = &comps_.back();
        double acc = 0.0;
        for (const auto& c : comps_) {
          acc += c.weight;
          if (u < acc) {
            pick = &c;
            break;
          }
        }
        double sd = std::sqrt(pick->var);
        for (std::size_t i = 0; i < dim_; ++i) out[i] = pick->mean[i] + sd * rs.next_gaussian();
        break;
      }
      case Kind::ring2d: {
        double a = 2.0 * std::numbers::pi * rs.next_uniform();
        double r = radius_ + noise_std_ * rs.next_gaussian();
        out[0] = r * std::cos(a);
        out[1] = r * std::sin(a);
        break;
      }
    }
    if (quantized_)
      for (double& v : out) v = quantize_to_lattice(v);
  }

  std::vector<double> sample(RandomStream& rs) const {
    std::vector<double> out(dim_);
    sample(rs, out);
    return out;
  }

  // Gaussian parameters, for the closed-form model.
  const std::vector<double>& gaussian_mean() const {
    if (kind_ != Kind::gaussian) throw ArgumentError("not a gaussian dataset");
    return mean_;
  }
  double gaussian_var() const {
    if (kind_ != Kind::gaussian) throw ArgumentError("not a gaussian dataset");
    return var_;
  }
  bool is_gaussian() const { return kind_ == Kind::gaussian; }

private:
  enum class Kind { gaussian, mixture2d, ring2d };
  Dataset(Kind kind, std::size_t dim) : kind_(kind), dim_(dim) {}

  Kind kind_;
  std::size_t dim_;
  bool quantized_ = false;
  std::vector<double> mean_;
  double var_ = 1.0;
  std::vector<MixtureComponent> comps_;
  double radius_ = 0.0, noise_std_ = 0.0;
};

}  // namespace dpstride
