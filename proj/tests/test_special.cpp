#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "hbtp/special.hpp"

using namespace hbtp;

TEST_CASE("digamma agrees with boost across scales") {
  for (double x : {1e-9, 1e-6, 1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 5.99, 6.0, 10.0, 57.3, 1e3, 1e6}) {
    const double ref = boost::math::digamma(x);
    CHECK(digamma(x) == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("digamma satisfies the recurrence psi(x+1) = psi(x) + 1/x") {
  for (double x = 0.013; x < 40; x *= 1.7)
    CHECK(digamma(x + 1) == doctest::Approx(digamma(x) + 1 / x).epsilon(1e-12));
}

TEST_CASE("digamma at 1 is minus the Euler-Mascheroni constant") {
  CHECK(digamma(1.0) == doctest::Approx(-0.5772156649015329).epsilon(1e-12));
}

TEST_CASE("arguments below the floor are clamped") {
  CHECK(digamma(0.0) == digamma(kMinSpecialArg));
  CHECK(digamma(-3.0) == digamma(kMinSpecialArg));
  CHECK(std::isfinite(digamma(0.0)));
  CHECK(log_gamma(0.0) == log_gamma(kMinSpecialArg));
  CHECK(std::isfinite(log_gamma(0.0)));
}

TEST_CASE("log_gamma agrees with boost") {
  for (double x : {1e-8, 0.01, 0.5, 1.0, 2.5, 10.0, 171.5, 1e5})
    CHECK(log_gamma(x) == doctest::Approx(boost::math::lgamma(x)).epsilon(1e-12));
}
