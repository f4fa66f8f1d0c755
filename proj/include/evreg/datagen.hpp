#pragma once

// Synthetic datasets for the two desk-scale experiments. Everything is a
// pure function of (spec, seed): rerunning a generator reproduces the data
// bit for bit.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "evreg/attention.hpp"
#include "evreg/grounding.hpp"
#include "evreg/matrix.hpp"
#include "evreg/rng.hpp"

namespace evreg {

struct CubicDatasetSpec {
    std::size_t n_train = 256;
    std::size_t n_test = 512;
    double train_lo = -4.0, train_hi = 4.0;
    double test_lo = -6.0, test_hi = 6.0;
    double noise_sigma = 3.0;
    std::uint64_t seed = 0;
};

inline void validate(const CubicDatasetSpec& s) {
    if (s.n_train == 0 || s.n_test == 0) throw std::domain_error("cubic spec: empty split");
    if (!(s.train_lo < s.train_hi) || !(s.test_lo < s.test_hi))
        throw std::domain_error("cubic spec: ranges must be ordered");
    if (!(s.test_lo < s.train_lo && s.train_hi < s.test_hi))
        throw std::domain_error(
            "cubic spec: test range must strictly contain the train range (the OOD band)");
    if (s.noise_sigma < 0.0) throw std::domain_error("cubic spec: noise sigma must be >= 0");
}

struct CubicDataset {
    std::vector<double> train_x, train_y;
    std::vector<double> test_x, test_y;
};

/// y = x^3 + eps, eps ~ N(0, noise_sigma^2). Train inputs are uniform draws
/// over the train range; test inputs are an even grid over the wider test
/// range so both in-distribution and OOD bands are covered evenly.
inline CubicDataset gen_cubic(const CubicDatasetSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);
    CubicDataset data;
    data.train_x.reserve(spec.n_train);
    data.train_y.reserve(spec.n_train);
    for (std::size_t i = 0; i < spec.n_train; ++i) {
        const double x = rng.uniform(spec.train_lo, spec.train_hi);
        data.train_x.push_back(x);
        data.train_y.push_back(x * x * x + rng.normal(0.0, spec.noise_sigma));
    }
    data.test_x.reserve(spec.n_test);
    data.test_y.reserve(spec.n_test);
    for (std::size_t i = 0; i < spec.n_test; ++i) {
        const double t = spec.n_test == 1 ? 0.5
                                          : static_cast<double>(i) /
                                                static_cast<double>(spec.n_test - 1);
        const double x = spec.test_lo + t * (spec.test_hi - spec.test_lo);
        data.test_x.push_back(x);
        data.test_y.push_back(x * x * x + rng.normal(0.0, spec.noise_sigma));
    }
    return data;
}

struct ToyGroundingSpec {
    std::size_t n_videos = 64;
    std::size_t clips = 32;        // L_v
    std::size_t dim = 16;          // D
    std::size_t query_tokens = 8;  // L_q
    std::size_t vocab = 64;
    double mask_ratio = 0.125;
    std::uint64_t seed = 0;
};

inline void validate(const ToyGroundingSpec& s) {
    if (s.n_videos == 0 || s.clips < 2 || s.dim < 2 || s.query_tokens == 0 || s.vocab < 2)
        throw std::domain_error("grounding spec: counts too small");
    if (!(s.mask_ratio > 0.0 && s.mask_ratio <= 1.0))
        throw std::domain_error("grounding spec: mask_ratio must be in (0,1]");
}

struct GroundingSample {
    FeatureSequence video;                      // clips x dim
    std::vector<std::size_t> tokens;            // query token ids
    std::vector<std::size_t> masked_positions;  // stage-1 mask set, entity first
    std::vector<ClipLabel> labels;              // per clip
    Span span;
};

struct GroundingDataset {
    ToyGroundingSpec spec;
    std::vector<GroundingSample> samples;
};

namespace detail {

/// Deterministic per-token signature vector; the query-dependent signal that
/// in-span clips carry. Depends only on (vocab seed, token id).
inline std::vector<double> token_signal(std::size_t dim, std::uint64_t seed, std::size_t token) {
    Rng rng(seed ^ (0xc2b2ae3d27d4eb4full * (token + 1)));
    std::vector<double> v(dim);
    double norm = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

inline double clip_center(std::size_t i, std::size_t clips) {
    return (static_cast<double>(i) + 0.5) / static_cast<double>(clips);
}

}  // namespace detail

/// Builds one sample around a given span: clip features carry a positional
/// channel, Gaussian background noise, and (inside the span) the entity
/// token's signal scaled by closeness to the span center. Saliency labels
/// use the same closeness, so they decay with distance from the center.
/// A decoy interval outside the span carries another token's signal at the
/// same profile but stays unlabeled, so locating the query's span requires
/// matching clip signals against the query rather than bump detection alone.
inline GroundingSample make_grounding_sample(const ToyGroundingSpec& spec, Rng& rng, Span span) {
    validate(span);
    GroundingSample sample;
    sample.span = span;

    sample.tokens.resize(spec.query_tokens);
    for (auto& t : sample.tokens) t = rng.below(spec.vocab);
    const std::size_t entity_pos = rng.below(spec.query_tokens);
    const std::size_t n_masked = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(spec.mask_ratio *
                                               static_cast<double>(spec.query_tokens))));
    sample.masked_positions.push_back(entity_pos);
    while (sample.masked_positions.size() < n_masked) {
        const std::size_t p = rng.below(spec.query_tokens);
        bool seen = false;
        for (std::size_t q : sample.masked_positions) seen = seen || q == p;
        if (!seen) sample.masked_positions.push_back(p);
    }

    std::size_t decoy_token = rng.below(spec.vocab);
    for (std::size_t tries = 0; tries < 64; ++tries) {
        bool in_query = false;
        for (std::size_t t : sample.tokens) in_query = in_query || t == decoy_token;
        if (!in_query) break;
        decoy_token = rng.below(spec.vocab);
    }
    const double min_len = 2.0 / static_cast<double>(spec.clips);
    const double lead = span.start, trail = 1.0 - span.end;
    Span decoy{0.0, 0.0};
    bool has_decoy = std::max(lead, trail) >= min_len;
    if (has_decoy) {
        const double len = std::min(std::max(span.end - span.start, min_len),
                                    std::max(lead, trail));
        const double lo = lead >= trail ? 0.0 : span.end;
        const double hi = lead >= trail ? span.start : 1.0;
        const double start = rng.uniform(lo, hi - len);
        decoy = {start, start + len};
    }

    const auto signal =
        detail::token_signal(spec.dim, spec.seed, sample.tokens[entity_pos]);
    const auto decoy_signal = detail::token_signal(spec.dim, spec.seed, decoy_token);
    const double mid = 0.5 * (span.start + span.end);
    const double half_width = std::max(0.5 * (span.end - span.start), 1e-9);
    const double decoy_mid = 0.5 * (decoy.start + decoy.end);
    const double decoy_half = std::max(0.5 * (decoy.end - decoy.start), 1e-9);

    Matrix features(spec.clips, spec.dim);
    sample.labels.resize(spec.clips);
    for (std::size_t i = 0; i < spec.clips; ++i) {
        const double center = detail::clip_center(i, spec.clips);
        for (std::size_t j = 0; j < spec.dim; ++j) features.at(i, j) = rng.normal(0.0, 0.3);
        features.at(i, 0) += center;  // positional channel
        ClipLabel& label = sample.labels[i];
        const bool inside = center >= span.start && center <= span.end;
        if (inside) {
            const double strength = std::max(0.0, 1.0 - std::abs(center - mid) / half_width);
            for (std::size_t j = 0; j < spec.dim; ++j)
                features.at(i, j) += strength * signal[j];
            label.foreground = 1;
            label.saliency = strength;
            label.offsets = {center - span.start, span.end - center};
        } else if (has_decoy && center >= decoy.start && center <= decoy.end) {
            const double strength =
                std::max(0.0, 1.0 - std::abs(center - decoy_mid) / decoy_half);
            for (std::size_t j = 0; j < spec.dim; ++j)
                features.at(i, j) += strength * decoy_signal[j];
        }
    }
    sample.video = FeatureSequence{std::move(features), Modality::Video};
    return sample;
}

/// Support of the biased training joint: starts in [0, kSpanMaxStart] and
/// lengths in [2/clips, kSpanMaxLen].
inline constexpr double kSpanMaxStart = 0.6;
inline constexpr double kSpanMaxLen = 0.3;

/// The biased training joint over (start, end): short spans concentrated
/// early. Starts never exceed 0.6, so the corner (start > 0.6 and end > 0.8)
/// carries exactly zero training mass and stays reserved as the temporal OOD
/// region.
inline Span sample_biased_span(const ToyGroundingSpec& spec, Rng& rng) {
    const double u = rng.uniform();
    const double start = kSpanMaxStart * u * u;
    const double min_len = 2.0 / static_cast<double>(spec.clips);
    const double v = rng.uniform();
    const double length = min_len + (kSpanMaxLen - min_len) * v * v;
    return {start, std::min(start + length, 1.0)};
}

/// True when the span lies inside the training joint's support.
inline bool in_trained_support(const Span& s, std::size_t clips) {
    const double len = s.end - s.start;
    return s.start <= kSpanMaxStart && len + 1e-12 >= 2.0 / static_cast<double>(clips) &&
           len <= kSpanMaxLen + 1e-12;
}

/// A span inside the held-out corner, for evaluation-only probes.
inline Span sample_ood_span(const ToyGroundingSpec& spec, Rng& rng) {
    const double min_len = 2.0 / static_cast<double>(spec.clips);
    const double start = rng.uniform(0.62, 0.9);
    const double end = std::max(start + min_len, rng.uniform(0.82, 1.0));
    return {start, std::min(end, 1.0)};
}

inline bool in_excluded_region(const Span& s) { return s.start > 0.6 && s.end > 0.8; }

inline GroundingDataset gen_grounding(const ToyGroundingSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);
    GroundingDataset data;
    data.spec = spec;
    data.samples.reserve(spec.n_videos);
    for (std::size_t i = 0; i < spec.n_videos; ++i)
        data.samples.push_back(make_grounding_sample(spec, rng, sample_biased_span(spec, rng)));
    return data;
}

}  // namespace evreg
