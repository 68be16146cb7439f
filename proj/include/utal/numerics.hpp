// SPDX-License-Identifier: Apache-2.0
//
// Special functions, seeded random streams and the small numerical oracles
// (central differences, Monte Carlo expectation) used to verify the losses.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

namespace utal {

namespace detail {

// Rational Chebyshev approximation of W. J. Cody (Math. Comp. 1969),
// |x| <= 0.46875: erf(x); otherwise erfc(|x|).
inline double erf_small(double x) {
  static constexpr double a[5] = {3.1611237438705656,     113.864154151050156,
                                  377.485237685302021,    3209.37758913846947,
                                  0.185777706184603153};
  static constexpr double b[4] = {23.6012909523441209, 244.024637934444173,
                                  1282.61652607737228, 2844.23683343917062};
  const double ysq = x * x;
  double num = a[4] * ysq;
  double den = ysq;
  for (int i = 0; i < 3; ++i) {
    num = (num + a[i]) * ysq;
    den = (den + b[i]) * ysq;
  }
  return x * (num + a[3]) / (den + b[3]);
}

inline double erfc_scaled_tail(double y) {
  // Returns erfc(y) for y > 0.46875.
  static constexpr double c[9] = {0.564188496988670089, 8.88314979438837594,
                                  66.1191906371416295,  298.635138197400131,
                                  881.95222124176909,   1712.04761263407058,
                                  2051.07837782607147,  1230.33935479799725,
                                  2.15311535474403846e-8};
  static constexpr double d[8] = {15.7449261107098347, 117.693950891312499,
                                  537.181101862009858, 1621.38957456669019,
                                  3290.79923573345963, 4362.61909014324716,
                                  3439.36767414372164, 1230.33935480374942};
  static constexpr double p[6] = {0.305326634961232344,   0.360344899949804439,
                                  0.125781726111229246,   0.0160837851487422766,
                                  6.58749161529837803e-4, 0.0163153871373020978};
  static constexpr double q[5] = {2.56852019228982242, 1.87295284992346047,
                                  0.527905102951428412, 0.0605183413124413191,
                                  0.00233520497626869185};
  constexpr double inv_sqrt_pi = 0.56418958354775628695;

  if (y >= 26.543) return 0.0;
  double r = 0.0;
  if (y <= 4.0) {
    double num = c[8] * y;
    double den = y;
    for (int i = 0; i < 7; ++i) {
      num = (num + c[i]) * y;
      den = (den + d[i]) * y;
    }
    r = (num + c[7]) / (den + d[7]);
  } else {
    const double ysq = 1.0 / (y * y);
    double num = p[5] * ysq;
    double den = ysq;
    for (int i = 0; i < 4; ++i) {
      num = (num + p[i]) * ysq;
      den = (den + q[i]) * ysq;
    }
    r = ysq * (num + p[4]) / (den + q[4]);
    r = (inv_sqrt_pi - r) / y;
  }
  // exp(-y*y) split to limit cancellation error for large y
  const double ys = std::trunc(y * 16.0) / 16.0;
  const double del = (y - ys) * (y + ys);
  return std::exp(-ys * ys) * std::exp(-del) * r;
}

}  // namespace detail

/// Error function. Cody's rational approximation; accurate to near double
/// precision everywhere, far inside the 1.5e-7 bound the losses rely on.
inline double erf(double x) {
  const double y = std::fabs(x);
  if (y <= 0.46875) return detail::erf_small(x);
  const double r = (0.5 - detail::erfc_scaled_tail(y)) + 0.5;
  return x < 0.0 ? -r : r;
}

/// Standard normal CDF, Phi(x) = (1 + erf(x / sqrt 2)) / 2.
inline double std_normal_cdf(double x) {
  return 0.5 * (1.0 + erf(x / std::numbers::sqrt2));
}

/// Splittable SplitMix64 stream with a cached polar-method spare.
///
/// Sub-streams are derived from (seed, tags...) by hashing, never by
/// advancing this stream, so a derived stream does not depend on how many
/// draws any other stream has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the stream unbiased and deterministic.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Marsaglia polar method. Rejected pairs are consumed from the stream and
  /// the second deviate of each accepted pair is returned by the next call.
  double normal() {
    if (spare_) {
      const double s = *spare_;
      spare_.reset();
      return s;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    return u * f;
  }

  /// Independent stream for the given tags, e.g. derive(epoch, batch, sample).
  template <typename... Tags>
  Rng derive(Tags... tags) const {
    std::uint64_t h = mix(seed_ ^ 0x6a09e667f3bcc909ULL);
    ((h = mix(h ^ (static_cast<std::uint64_t>(tags) + kGolden))), ...);
    return Rng(h);
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  std::optional<double> spare_;
};

inline double sample_std_normal(Rng& rng) { return rng.normal(); }

/// Central difference (f(x + h) - f(x - h)) / 2h.
template <typename F>
double finite_diff(F&& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Empirical mean and standard error of |d - sigma * eps|, eps ~ N(0, 1).
inline MonteCarloEstimate mc_expected_l1(double d, double sigma, std::size_t n,
                                         Rng& rng) {
  // Welford accumulation; n is large and the naive sum of squares loses digits.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::fabs(d - sigma * rng.normal());
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace utal
