#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dpstride/errors.hpp"

namespace dpstride {

// Signal scale f, noise scale g, and their time derivatives at one t.
// Valid schedules have f(0)=1, f(1)=0, g(0)=0, g(1)=1, f non-increasing and
// g non-decreasing on [0,1].
struct ScheduleValues {
  double f = 0.0;
  double g = 0.0;
  double df = 0.0;
  double dg = 0.0;
};

namespace detail {

// Monotone cubic interpolant (Fritsch-Carlson limited slopes). Stays within
// the data range, so a monotone knot sequence gives a monotone curve.
class MonotoneCubic {
public:
  MonotoneCubic() = default;
  MonotoneCubic(std::vector<double> x, std::vector<double> y)
      : x_(std::move(x)), y_(std::move(y)) {
    std::size_t n = x_.size();
    std::vector<double> delta(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i)
      delta[i] = (y_[i + 1] - y_[i]) / (x_[i + 1] - x_[i]);
    m_.resize(n);
    m_[0] = delta[0];
    m_[n - 1] = delta[n - 2];
    for (std::size_t i = 1; i + 1 < n; ++i)
      m_[i] = (delta[i - 1] * delta[i] <= 0.0) ? 0.0 : 0.5 * (delta[i - 1] + delta[i]);
    // Limit slopes so each segment stays monotone.
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (delta[i] == 0.0) {
        m_[i] = m_[i + 1] = 0.0;
        continue;
      }
      double a = m_[i] / delta[i];
      double b = m_[i + 1] / delta[i];
      double s = a * a + b * b;
      if (s > 9.0) {
        double tau = 3.0 / std::sqrt(s);
        m_[i] = tau * a * delta[i];
        m_[i + 1] = tau * b * delta[i];
      }
    }
  }

  // Value and derivative of the cubic Hermite segment containing t.
  std::pair<double, double> eval(double t) const {
    std::size_t i = segment(t);
    double h = x_[i + 1] - x_[i];
    double u = (t - x_[i]) / h;
    double u2 = u * u, u3 = u2 * u;
    double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u;
    double h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
    double v = h00 * y_[i] + h * h10 * m_[i] + h01 * y_[i + 1] + h * h11 * m_[i + 1];
    double d00 = 6 * u2 - 6 * u, d10 = 3 * u2 - 4 * u + 1;
    double d01 = -6 * u2 + 6 * u, d11 = 3 * u2 - 2 * u;
    double dv = (d00 * y_[i] + h * d10 * m_[i] + d01 * y_[i + 1] + h * d11 * m_[i + 1]) / h;
    return {v, dv};
  }

private:
  std::size_t segment(double t) const {
    std::size_t lo = 0, hi = x_.size() - 1;
    while (hi - lo > 1) {
      std::size_t mid = (lo + hi) / 2;
      (x_[mid] <= t ? lo : hi) = mid;
    }
    return lo;
  }

  std::vector<double> x_, y_, m_;
};

}  // namespace detail

class NoiseSchedule {
public:
  // f = cos(pi t / 2), g = sin(pi t / 2).
  static NoiseSchedule trig() { return NoiseSchedule(Kind::trig, "trig"); }

  // f = sqrt(1 - t), g = sqrt(t). Derivatives diverge at the endpoints,
  // matching the infinite-slope behavior of the underlying variance law.
  static NoiseSchedule linear_vp() { return NoiseSchedule(Kind::linear_vp, "linear_vp"); }

  // User-supplied knots, interpolated by a monotone cubic. Knot times must
  // be strictly increasing from 0 to 1; f must run from 1 down to 0 and g
  // from 0 up to 1 (boundary tolerance 1e-12).
  static NoiseSchedule tabulated(std::vector<double> times, std::vector<double> f,
                                 std::vector<double> g) {
    std::size_t n = times.size();
    if (n < 2 || f.size() != n || g.size() != n)
      throw ScheduleError("tabulated schedule needs matching times/f/g with at least 2 knots");
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(times[i]) || !std::isfinite(f[i]) || !std::isfinite(g[i]))
        throw ScheduleError("tabulated schedule has non-finite knots");
    if (times.front() != 0.0 || times.back() != 1.0)
      throw ScheduleError("tabulated schedule times must span [0,1]");
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (times[i + 1] <= times[i]) throw ScheduleError("tabulated schedule times must be strictly increasing");
      if (f[i + 1] > f[i]) throw ScheduleError("tabulated schedule f must be non-increasing");
      if (g[i + 1] < g[i]) throw ScheduleError("tabulated schedule g must be non-decreasing");
    }
    constexpr double tol = 1e-12;
    if (std::abs(f.front() - 1.0) > tol || std::abs(f.back()) > tol ||
        std::abs(g.front()) > tol || std::abs(g.back() - 1.0) > tol)
      throw ScheduleError("tabulated schedule must satisfy f(0)=1, f(1)=0, g(0)=0, g(1)=1");
    NoiseSchedule s(Kind::tabulated, "custom");
    s.fi_ = detail::MonotoneCubic(times, std::move(f));
    s.gi_ = detail::MonotoneCubic(std::move(times), std::move(g));
    return s;
  }

  ScheduleValues eval(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("schedule time outside [0,1]");
    constexpr double half_pi = std::numbers::pi / 2.0;
    switch (kind_) {
      case Kind::trig: {
        double c = std::cos(half_pi * t), s = std::sin(half_pi * t);
        return {c, s, -half_pi * s, half_pi * c};
      }
      case Kind::linear_vp: {
        double f = std::sqrt(1.0 - t), g = std::sqrt(t);
        double inf = std::numeric_limits<double>::infinity();
        double df = t < 1.0 ? -0.5 / f : -inf;
        double dg = t > 0.0 ? 0.5 / g : inf;
        return {f, g, df, dg};
      }
      case Kind::tabulated: {
        auto [f, df] = fi_.eval(t);
        auto [g, dg] = gi_.eval(t);
        return {f, g, df, dg};
      }
    }
    throw Error("unreachable");
  }

  const std::string& name() const { return name_; }

private:
  enum class Kind { trig, linear_vp, tabulated };
  NoiseSchedule(Kind kind, std::string name) : kind_(kind), name_(std::move(name)) {}

  Kind kind_;
  std::string name_;
  detail::MonotoneCubic fi_, gi_;
};

}  // namespace dpstride
