#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evreg/nig.hpp"

namespace evreg {

enum class NormalizationMode { StandardMinMax, PaperMinMax, Tanh };
enum class GeomType { TypeI, TypeII };
enum class RegularizerKind { Vanilla, GeomTypeI, GeomTypeII };

/// Per-sample error/evidence values before and after batch normalization.
struct ErrorEvidencePair {
    double delta = 0.0;       // |b - gamma|
    double phi = 0.0;         // 2*upsilon + alpha
    double delta_norm = 0.0;  // in [0,1] under min-max modes
    double phi_norm = 0.0;
};

struct LossWeights {
    double lambda_nll = 1.0;
    double lambda_geom = 1.0;
    double lambda_der = 1e-3;
    GeomType geom_type = GeomType::TypeI;
};

inline void validate(const LossWeights& w) {
    if (w.lambda_nll < 0.0 || w.lambda_geom < 0.0 || w.lambda_der < 0.0)
        throw std::domain_error("loss weights must be non-negative");
}

/// StandardMinMax: (v - min)/(max - min). PaperMinMax: v/(max - min), the
/// literal published formula, kept selectable for comparison; it does not land
/// on [0,1] in general. Tanh: elementwise fallback that needs no batch
/// statistics.
inline std::vector<double> normalize_batch(std::span<const double> values,
                                           NormalizationMode mode) {
    if (values.empty()) throw std::domain_error("normalize_batch: empty batch");
    std::vector<double> out(values.begin(), values.end());
    if (mode == NormalizationMode::Tanh) {
        for (double& v : out) v = std::tanh(v);
        return out;
    }
    double lo = out[0], hi = out[0];
    for (double v : out) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    if (range <= 0.0)
        throw std::domain_error("normalize_batch: degenerate batch (all values equal)");
    const double shift = (mode == NormalizationMode::StandardMinMax) ? lo : 0.0;
    for (double& v : out) v = (v - shift) / range;
    return out;
}

/// Min-max normalization with the documented automatic fallback: a batch with
/// no spread (including batch size 1) is sent through Tanh instead.
inline std::vector<double> normalize_batch_or_tanh(std::span<const double> values,
                                                   NormalizationMode preferred) {
    if (preferred != NormalizationMode::Tanh) {
        try {
            return normalize_batch(values, preferred);
        } catch (const std::domain_error&) {
        }
    }
    return normalize_batch(values, NormalizationMode::Tanh);
}

inline double vanilla_regularizer(double delta, double phi) {
    if (!(delta >= 0.0))
        throw std::domain_error("vanilla_regularizer: delta must be >= 0, got " +
                                std::to_string(delta));
    return delta * phi;
}

namespace detail {
inline void check_unit_interval(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
        throw std::domain_error(std::string(name) + " must be in [0,1], got " +
                                std::to_string(v));
}
}  // namespace detail

/// (phi_norm + delta_norm - 1)^2. Pulls normalized evidence toward the line
/// phi_norm = 1 - delta_norm; the partial in phi_norm is 2(delta_norm +
/// phi_norm - 1), with delta_norm held constant under differentiation.
inline double geom_type1(double delta_norm, double phi_norm) {
    detail::check_unit_interval(delta_norm, "geom_type1: delta_norm");
    detail::check_unit_interval(phi_norm, "geom_type1: phi_norm");
    const double t = phi_norm + delta_norm - 1.0;
    return t * t;
}

/// (phi_norm + delta_norm - 1)^2 - (phi_norm - delta_norm)^2, the stricter
/// variant; same stop-gradient treatment of delta_norm.
inline double geom_type2(double delta_norm, double phi_norm) {
    detail::check_unit_interval(delta_norm, "geom_type2: delta_norm");
    detail::check_unit_interval(phi_norm, "geom_type2: phi_norm");
    const double t = phi_norm + delta_norm - 1.0;
    const double s = phi_norm - delta_norm;
    return t * t - s * s;
}

/// lambda_nll * NLL + lambda_geom * Geom, per sample.
inline double evidential_loss(double b, const NIGParams& params, const ErrorEvidencePair& pair,
                              const LossWeights& weights) {
    validate(weights);
    const double geom = (weights.geom_type == GeomType::TypeI)
                            ? geom_type1(pair.delta_norm, pair.phi_norm)
                            : geom_type2(pair.delta_norm, pair.phi_norm);
    return weights.lambda_nll * nll_loss(b, params) + weights.lambda_geom * geom;
}

/// grounding + lambda_der * (2/N) * sum of per-clip evidential terms.
inline double total_loss(double grounding, std::span<const double> evidential_terms,
                         const LossWeights& weights) {
    validate(weights);
    if (evidential_terms.empty()) throw std::domain_error("total_loss: no evidential terms");
    double sum = 0.0;
    for (double t : evidential_terms) sum += t;
    const double n = static_cast<double>(evidential_terms.size());
    return grounding + weights.lambda_der * (2.0 / n) * sum;
}

/// Builds per-sample (delta, phi) pairs for one batch and normalizes both
/// with the same mode; degenerate batches fall back to Tanh automatically.
inline std::vector<ErrorEvidencePair> build_error_evidence_pairs(
    std::span<const double> observations, std::span<const NIGParams> params,
    NormalizationMode mode = NormalizationMode::StandardMinMax) {
    if (observations.size() != params.size())
        throw std::invalid_argument("build_error_evidence_pairs: size mismatch");
    if (observations.empty())
        throw std::domain_error("build_error_evidence_pairs: empty batch");
    std::vector<double> deltas(observations.size()), phis(observations.size());
    for (std::size_t i = 0; i < observations.size(); ++i) {
        deltas[i] = std::abs(observations[i] - params[i].gamma);
        phis[i] = evidence(params[i]);
    }
    const auto deltas_n = normalize_batch_or_tanh(deltas, mode);
    const auto phis_n = normalize_batch_or_tanh(phis, mode);
    std::vector<ErrorEvidencePair> out(observations.size());
    for (std::size_t i = 0; i < observations.size(); ++i)
        out[i] = {deltas[i], phis[i], deltas_n[i], phis_n[i]};
    return out;
}

struct GradientFieldPoint {
    double delta_norm = 0.0;
    double phi_norm = 0.0;
    double minus_grad_phi = 0.0;
};

/// -dL/d(evidence coordinate) for each regularizer, with delta treated as a
/// constant. Vanilla differentiates in raw phi; the Geom variants in phi_norm.
inline double minus_grad_phi(RegularizerKind kind, double delta, double phi) {
    switch (kind) {
        case RegularizerKind::Vanilla:
            return -delta;
        case RegularizerKind::GeomTypeI:
            return -2.0 * (delta + phi - 1.0);
        case RegularizerKind::GeomTypeII:
            return 2.0 - 4.0 * delta;
    }
    throw std::invalid_argument("minus_grad_phi: unknown regularizer");
}

/// Uniform resolution x resolution sampling of [0,1]^2, delta-major order,
/// ready for CSV or quiver-style SVG emission.
inline std::vector<GradientFieldPoint> gradient_field(RegularizerKind kind,
                                                      std::size_t resolution) {
    if (resolution < 2) throw std::domain_error("gradient_field: resolution must be >= 2");
    std::vector<GradientFieldPoint> grid;
    grid.reserve(resolution * resolution);
    const double step = 1.0 / static_cast<double>(resolution - 1);
    for (std::size_t i = 0; i < resolution; ++i) {
        const double d = static_cast<double>(i) * step;
        for (std::size_t j = 0; j < resolution; ++j) {
            const double p = static_cast<double>(j) * step;
            grid.push_back({d, p, minus_grad_phi(kind, d, p)});
        }
    }
    return grid;
}

}  // namespace evreg
