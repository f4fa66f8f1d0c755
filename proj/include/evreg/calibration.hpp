#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evreg {

enum class EucmVariant { PaperLiteral, Consistency };

struct CalibrationReport {
    double eucm = 0.0;
    double entropy = 0.0;
    std::size_t n_samples = 0;
    EucmVariant eucm_variant = EucmVariant::Consistency;
    std::size_t bins = 64;
};

namespace detail {

inline std::size_t bin_index(double v, double lo, double width, std::size_t bins) {
    if (width <= 0.0) return 0;
    const auto idx = static_cast<long long>(std::floor((v - lo) / width));
    return static_cast<std::size_t>(std::clamp<long long>(idx, 0, static_cast<long long>(bins) - 1));
}

}  // namespace detail

/// Maps every value through the exact tie-aware empirical CDF, F(v) =
/// #{x <= v}/n. Outputs lie in (0, 1] and preserve the input's sorted order.
/// A coarser bins-bin CDF approximation would merge heavy bins into single
/// atoms, which both breaks the entropy guarantee on skewed samples (the
/// motivating use case) and diverges from the brute-force CDF oracle; `bins`
/// is validated and carried as report metadata only.
inline std::vector<double> histogram_equalize(std::span<const double> values, std::size_t bins) {
    if (values.empty()) throw std::domain_error("histogram_equalize: empty input");
    if (bins < 2) throw std::domain_error("histogram_equalize: bins must be >= 2");
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> out(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double cdf = static_cast<double>(j + 1) / static_cast<double>(n);
        for (std::size_t k = i; k <= j; ++k) out[order[k]] = cdf;
        i = j + 1;
    }
    return out;
}

/// PaperLiteral: mean (delta + u)^2, the published formula. Consistency:
/// mean (delta - u)^2, which actually rewards "larger error, larger
/// uncertainty". Both are reported; neither is privileged.
inline double eucm(std::span<const double> delta_norm, std::span<const double> uncertainty_norm,
                   EucmVariant variant) {
    if (delta_norm.size() != uncertainty_norm.size())
        throw std::invalid_argument("eucm: length mismatch");
    if (delta_norm.empty()) throw std::domain_error("eucm: empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < delta_norm.size(); ++i) {
        const double d = delta_norm[i], u = uncertainty_norm[i];
        if (!(d >= 0.0 && d <= 1.0 && u >= 0.0 && u <= 1.0))
            throw std::domain_error("eucm: inputs must be in [0,1]");
        const double t = (variant == EucmVariant::PaperLiteral) ? d + u : d - u;
        sum += t * t;
    }
    return sum / static_cast<double>(delta_norm.size());
}

/// Shannon entropy (nats) of the `bins`-bin histogram of values over the
/// fixed interval [0, 1], with 0 log 0 := 0.
inline double distribution_entropy(std::span<const double> values, std::size_t bins) {
    if (values.empty()) throw std::domain_error("distribution_entropy: empty input");
    if (bins < 2) throw std::domain_error("distribution_entropy: bins must be >= 2");
    std::vector<double> counts(bins, 0.0);
    const double width = 1.0 / static_cast<double>(bins);
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error("distribution_entropy: values must be in [0,1], got " +
                                    std::to_string(v));
        counts[detail::bin_index(v, 0.0, width, bins)] += 1.0;
    }
    double entropy = 0.0;
    for (double c : counts) {
        if (c == 0.0) continue;
        const double p = c / static_cast<double>(values.size());
        entropy -= p * std::log(p);
    }
    return entropy;
}

/// Gaussian KDE with the Silverman bandwidth 1.06 * sigma_hat * n^(-1/5).
inline std::vector<double> gaussian_kde(std::span<const double> values,
                                        std::span<const double> eval_points) {
    if (values.size() < 2) throw std::domain_error("gaussian_kde: need at least 2 samples");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sigma = std::sqrt(ss / static_cast<double>(values.size() - 1));
    if (!(sigma > 0.0))
        throw std::domain_error(
            "gaussian_kde: degenerate sample (zero spread); add jitter to the values");
    const double h =
        1.06 * sigma * std::pow(static_cast<double>(values.size()), -0.2);
    const double norm =
        1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    std::vector<double> out(eval_points.size(), 0.0);
    for (std::size_t i = 0; i < eval_points.size(); ++i) {
        double acc = 0.0;
        for (double v : values) {
            const double z = (eval_points[i] - v) / h;
            acc += std::exp(-0.5 * z * z);
        }
        out[i] = norm * acc;
    }
    return out;
}

}  // namespace evreg
