#pragma once

namespace hbtp {

// Smallest argument passed to digamma / log_gamma; shape parameters of the
// transmission factors can be vanishingly small.
inline constexpr double kMinSpecialArg = 1e-10;

/// Digamma ψ(x) for x > 0. Arguments below kMinSpecialArg are clamped.
double digamma(double x);

/// ln Γ(x) for x > 0, clamped like digamma. Reentrant.
double log_gamma(double x);

}  // namespace hbtp
