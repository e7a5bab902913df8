#include "hbtp/special.hpp"

#include <cmath>
#include <limits>

namespace hbtp {

double digamma(double x) {
  if (std::isnan(x)) return x;
  if (x < kMinSpecialArg) x = kMinSpecialArg;
  if (std::isinf(x)) return x;
  double result = 0.0;
  // Shift into the asymptotic region with ψ(x) = ψ(x+1) - 1/x.
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli series: -1/(2x) - Σ B_2k / (2k x^2k)
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  result += std::log(x) - 0.5 * inv - series;
  return result;
}

double log_gamma(double x) {
  if (std::isnan(x)) return x;
  if (x < kMinSpecialArg) x = kMinSpecialArg;
  int sign = 0;
  return ::lgamma_r(x, &sign);
}

}  // namespace hbtp
