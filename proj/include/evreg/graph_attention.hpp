#pragma once

// Tape twins of the fusion stack. Forward values reproduce the plain
// implementations bit for bit (same op order), and every projection matrix
// is a differentiable tape node.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evreg/attention.hpp"
#include "evreg/autodiff.hpp"
#include "evreg/nn.hpp"
#include "evreg/rng.hpp"

namespace evreg {

struct AttentionVars {
    ad::Var w_q, w_k, w_v, w_o;
};

struct RffBlockVars {
    AttentionVars cross;
    AttentionVars self;
};

inline ad::Var scaled_dot_attention_graph(const ad::Var& queries, const ad::Var& keys,
                                          const ad::Var& values) {
    if (queries.value().cols != keys.value().cols)
        throw std::invalid_argument("scaled_dot_attention: query/key dims disagree");
    if (keys.value().rows != values.value().rows)
        throw std::invalid_argument("scaled_dot_attention: key/value row counts disagree");
    const double scale = 1.0 / std::sqrt(static_cast<double>(keys.value().cols));
    const ad::Var scores = ad::affine(ad::matmul(queries, ad::transpose(keys)), scale, 0.0);
    return ad::matmul(ad::softmax_rows(scores), values);
}

inline ad::Var projected_attention_graph(const ad::Var& q_tokens, const ad::Var& kv_tokens,
                                         const AttentionVars& p) {
    const ad::Var attended = scaled_dot_attention_graph(ad::matmul(q_tokens, p.w_q),
                                                        ad::matmul(kv_tokens, p.w_k),
                                                        ad::matmul(kv_tokens, p.w_v));
    return ad::matmul(attended, p.w_o);
}

/// Tape twin of detail::layer_norm_rows, composed from primitive ops.
inline ad::Var layer_norm_rows_graph(const ad::Var& x, double eps = 1e-6) {
    ad::Tape& t = *x.tape;
    const std::size_t d = x.value().cols;
    const ad::Var avg = t.constant(Matrix(d, 1, 1.0 / static_cast<double>(d)));
    const ad::Var ones_row = t.constant(Matrix(1, d, 1.0));
    const ad::Var centered = ad::sub(x, ad::matmul(ad::matmul(x, avg), ones_row));
    const ad::Var var = ad::matmul(ad::mul(centered, centered), avg);
    const ad::Var sd = ad::matmul(ad::sqrt(ad::affine(var, 1.0, eps)), ones_row);
    return ad::div(centered, sd);
}

inline std::pair<ad::Var, ad::Var> rff_block_graph(const ad::Var& video, const ad::Var& text,
                                                   const RffBlockVars& params,
                                                   bool residual = false) {
    if (video.value().cols != text.value().cols)
        throw std::invalid_argument("rff_block: branch dims disagree");
    ad::Var v_cross = projected_attention_graph(video, text, params.cross);
    ad::Var t_cross = projected_attention_graph(text, video, params.cross);
    if (residual) {
        v_cross = layer_norm_rows_graph(ad::add(v_cross, video));
        t_cross = layer_norm_rows_graph(ad::add(t_cross, text));
    }
    ad::Var v_self = projected_attention_graph(v_cross, v_cross, params.self);
    ad::Var t_self = projected_attention_graph(t_cross, t_cross, params.self);
    if (residual) {
        v_self = layer_norm_rows_graph(ad::add(v_self, v_cross));
        t_self = layer_norm_rows_graph(ad::add(t_self, t_cross));
    }
    return {v_self, t_self};
}

inline std::pair<ad::Var, ad::Var> rff_stack_graph(ad::Var video, ad::Var text,
                                                   const std::vector<RffBlockVars>& params,
                                                   std::size_t n, bool residual = false) {
    if (n < 1) throw std::invalid_argument("rff_stack: n must be >= 1");
    if (params.size() != n)
        throw std::invalid_argument("rff_stack: need exactly one parameter set per block");
    for (std::size_t i = 0; i < n; ++i) {
        auto [v, t] = rff_block_graph(video, text, params[i], residual);
        video = v;
        text = t;
    }
    return {video, text};
}

/// Fresh parameters for an n-block fusion stack, named
/// "block{i}.{cross|self}.{w_q|w_k|w_v|w_o}". Xavier-uniform, like the MLP.
inline std::vector<NamedParam> init_rff_stack(std::size_t n, std::size_t dim, Rng& rng) {
    std::vector<NamedParam> params;
    params.reserve(n * 8);
    for (std::size_t i = 0; i < n; ++i)
        for (const char* set : {"cross", "self"})
            for (const char* name : {"w_q", "w_k", "w_v", "w_o"})
                params.push_back({"block" + std::to_string(i) + "." + set + "." + name,
                                  xavier_matrix(rng, dim, dim)});
    return params;
}

/// Views an init_rff_stack-ordered parameter list (already pushed onto a
/// tape) as per-block AttentionVars.
inline std::vector<RffBlockVars> rff_stack_vars(const std::vector<ad::Var>& params,
                                                std::size_t n) {
    if (params.size() != n * 8)
        throw std::invalid_argument("rff_stack_vars: need 8 matrices per block");
    std::vector<RffBlockVars> blocks;
    blocks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t b = i * 8;
        blocks.push_back({{params[b + 0], params[b + 1], params[b + 2], params[b + 3]},
                          {params[b + 4], params[b + 5], params[b + 6], params[b + 7]}});
    }
    return blocks;
}

/// Plain-side view of the same ordering, for running the reference path.
inline std::vector<RffBlockParams> rff_stack_params(const std::vector<NamedParam>& params,
                                                    std::size_t n) {
    if (params.size() != n * 8)
        throw std::invalid_argument("rff_stack_params: need 8 matrices per block");
    std::vector<RffBlockParams> blocks;
    blocks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t b = i * 8;
        blocks.push_back({{params[b + 0].value, params[b + 1].value, params[b + 2].value,
                           params[b + 3].value, true},
                          {params[b + 4].value, params[b + 5].value, params[b + 6].value,
                           params[b + 7].value, true}});
    }
    return blocks;
}

}  // namespace evreg
