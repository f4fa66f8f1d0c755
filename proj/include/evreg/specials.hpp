#pragma once

#include <cmath>
#include <span>

namespace evreg {

inline double log_gamma(double x) { return std::lgamma(x); }

// Digamma for x > 0: shift into the asymptotic regime, then the standard
// Bernoulli-number series.
inline double digamma(double x) {
    double acc = 0.0;
    while (x < 8.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = inv2 * (1.0 / 12.0
                  - inv2 * (1.0 / 120.0
                  - inv2 * (1.0 / 252.0
                  - inv2 * (1.0 / 240.0
                  - inv2 * (1.0 / 132.0)))));
    return acc + std::log(x) - 0.5 * inv - series;
}

// Overflow-safe log(1 + e^x).
inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double log_sum_exp(std::span<const double> xs) {
    double m = xs[0];
    for (double x : xs) m = std::max(m, x);
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace evreg
