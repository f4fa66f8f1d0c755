#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "evreg/matrix.hpp"

namespace evreg {

enum class Modality { Video, Text };

struct FeatureSequence {
    Matrix tokens;  // L x D
    Modality modality = Modality::Video;

    std::size_t length() const { return tokens.rows; }
    std::size_t dim() const { return tokens.cols; }
};

/// One set of learned projections. The published equations omit projections
/// entirely, but parameter sharing across the two cross directions is only
/// meaningful with parameters present; identity projections recover the
/// projection-free literal form.
struct AttentionParams {
    Matrix w_q, w_k, w_v, w_o;  // each D x D
    bool shared_cross = true;
};

inline void validate(const AttentionParams& p, std::size_t dim) {
    for (const Matrix* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
        if (m->rows != dim || m->cols != dim)
            throw std::invalid_argument("attention params: projections must be DxD");
    }
}

inline AttentionParams identity_attention_params(std::size_t dim) {
    return {Matrix::identity(dim), Matrix::identity(dim), Matrix::identity(dim),
            Matrix::identity(dim), true};
}

/// Softmax(Q K^T / sqrt(d_k)) V with row-wise softmax, single head.
inline Matrix scaled_dot_attention(const Matrix& queries, const Matrix& keys,
                                   const Matrix& values) {
    if (queries.cols != keys.cols)
        throw std::invalid_argument("scaled_dot_attention: query/key dims disagree");
    if (keys.rows != values.rows)
        throw std::invalid_argument("scaled_dot_attention: key/value row counts disagree");
    const double scale = 1.0 / std::sqrt(static_cast<double>(keys.cols));
    Matrix scores = matmul(queries, transpose(keys));
    for (std::size_t i = 0; i < scores.rows; ++i) {
        double row_max = scores.at(i, 0) * scale;
        for (std::size_t j = 0; j < scores.cols; ++j)
            row_max = std::max(row_max, scores.at(i, j) * scale);
        double denom = 0.0;
        for (std::size_t j = 0; j < scores.cols; ++j) {
            const double e = std::exp(scores.at(i, j) * scale - row_max);
            scores.at(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j < scores.cols; ++j) scores.at(i, j) /= denom;
    }
    return matmul(scores, values);
}

namespace detail {

inline Matrix projected_attention(const Matrix& q_tokens, const Matrix& kv_tokens,
                                  const AttentionParams& p) {
    const Matrix attended = scaled_dot_attention(matmul(q_tokens, p.w_q),
                                                 matmul(kv_tokens, p.w_k),
                                                 matmul(kv_tokens, p.w_v));
    return matmul(attended, p.w_o);
}

}  // namespace detail

/// Parameters of one fusion block: a single cross set serving both
/// directions plus a single self set serving both branches, 8 D^2 entries.
struct RffBlockParams {
    AttentionParams cross;
    AttentionParams self;
};

inline std::size_t parameter_count(const RffBlockParams& p) {
    std::size_t total = 0;
    for (const AttentionParams* set : {&p.cross, &p.self})
        for (const Matrix* m : {&set->w_q, &set->w_k, &set->w_v, &set->w_o})
            total += m->data.size();
    return total;
}

inline std::size_t parameter_count(const std::vector<RffBlockParams>& stack) {
    std::size_t total = 0;
    for (const auto& block : stack) total += parameter_count(block);
    return total;
}

namespace detail {

inline Matrix add_rows(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

/// Row-wise standardization without learned gain or shift. Accumulation
/// order mirrors the tape twin so both produce bit-identical values.
inline Matrix layer_norm_rows(const Matrix& x, double eps = 1e-6) {
    Matrix out = x;
    const double inv_d = 1.0 / static_cast<double>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) mu += x.at(i, j) * inv_d;
        double var = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            const double c = x.at(i, j) - mu;
            var += c * c * inv_d;
        }
        const double sd = std::sqrt(var + eps);
        for (std::size_t j = 0; j < x.cols; ++j) out.at(i, j) = (x.at(i, j) - mu) / sd;
    }
    return out;
}

}  // namespace detail

/// Flipped cross-attention (each branch queries the other with the shared
/// cross projections) followed by per-branch self-attention. By default there
/// are no residuals, layer norm, or feed-forward sublayers; `residual` adds a
/// skip connection plus row-wise layer norm around each attention sublayer so
/// per-token identity survives deep stacks at bounded magnitude. Each branch
/// keeps its own row count, so the branch's tokens are the queries of its
/// cross step.
inline std::pair<FeatureSequence, FeatureSequence> rff_block(const FeatureSequence& video,
                                                             const FeatureSequence& text,
                                                             const RffBlockParams& params,
                                                             bool residual = false) {
    if (video.dim() != text.dim())
        throw std::invalid_argument("rff_block: branch dims disagree");
    validate(params.cross, video.dim());
    validate(params.self, video.dim());
    Matrix v_cross = detail::projected_attention(video.tokens, text.tokens, params.cross);
    Matrix t_cross = detail::projected_attention(text.tokens, video.tokens, params.cross);
    if (residual) {
        v_cross = detail::layer_norm_rows(detail::add_rows(v_cross, video.tokens));
        t_cross = detail::layer_norm_rows(detail::add_rows(t_cross, text.tokens));
    }
    Matrix v_self = detail::projected_attention(v_cross, v_cross, params.self);
    Matrix t_self = detail::projected_attention(t_cross, t_cross, params.self);
    if (residual) {
        v_self = detail::layer_norm_rows(detail::add_rows(v_self, v_cross));
        t_self = detail::layer_norm_rows(detail::add_rows(t_self, t_cross));
    }
    return {FeatureSequence{std::move(v_self), video.modality},
            FeatureSequence{std::move(t_self), text.modality}};
}

/// n fusion blocks applied in sequence; one parameter set per block.
inline std::pair<FeatureSequence, FeatureSequence> rff_stack(
    FeatureSequence video, FeatureSequence text, const std::vector<RffBlockParams>& params,
    std::size_t n, bool residual = false) {
    if (n < 1) throw std::invalid_argument("rff_stack: n must be >= 1");
    if (params.size() != n)
        throw std::invalid_argument("rff_stack: need exactly one parameter set per block");
    for (std::size_t i = 0; i < n; ++i) {
        auto [v, t] = rff_block(video, text, params[i], residual);
        video = std::move(v);
        text = std::move(t);
    }
    return {std::move(video), std::move(text)};
}

}  // namespace evreg
