#pragma once

#include <cmath>
#include <numbers>

namespace mmdreg::normal_math {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

inline double pdf(double z) { return std::exp(-0.5 * z * z - kLogSqrt2Pi); }

inline double cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Below this point the erfc route loses relative accuracy; switch to the
// asymptotic expansion of the Mills ratio.
inline constexpr double kTailSwitch = -30.0;

/// log Φ(z), finite for every finite z.
inline double log_cdf(double z) {
  if (z > kTailSwitch) return std::log(cdf(z));
  const double z2 = z * z;
  const double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
  return -0.5 * z2 - kLogSqrt2Pi - std::log(-z) + std::log(series);
}

/// φ(z)/Φ(z) (inverse Mills ratio), stable in the lower tail.
inline double inverse_mills(double z) {
  if (z > kTailSwitch) return pdf(z) / cdf(z);
  const double z2 = z * z;
  const double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
  return -z / series;
}

}  // namespace mmdreg::normal_math
