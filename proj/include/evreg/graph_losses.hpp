#pragma once

// Tape re-expressions of the trainable losses. The plain-double versions in
// nig.hpp / regularizers.hpp / grounding.hpp are the behavioral contract;
// each function here reproduces the same arithmetic on autodiff variables so
// forward values agree and gradients come from the tape.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "evreg/autodiff.hpp"
#include "evreg/grounding.hpp"
#include "evreg/matrix.hpp"
#include "evreg/nn.hpp"
#include "evreg/regularizers.hpp"

namespace evreg {

/// Per-sample expanded marginal NLL, (n x 1). Targets enter as constants.
inline ad::Var nll_loss_graph(const EvidentialVars& ev, const ad::Var& targets) {
    using namespace ad;
    Var omega = 2.0 * mul(ev.beta, ev.upsilon + 1.0);
    Var resid = sub(targets, ev.gamma);
    return 0.5 * (std::log(std::numbers::pi) - log(ev.upsilon)) -
           mul(ev.alpha, log(omega)) +
           mul(ev.alpha + 0.5, log(mul(mul(resid, resid), ev.upsilon) + omega)) +
           lgamma(ev.alpha) - lgamma(ev.alpha + 0.5);
}

/// Normalized (error, evidence) coordinates on the tape. The error column is
/// a tape constant: the stop-gradient contract severs all flow into the
/// location parameter. Evidence is normalized with batch statistics frozen at
/// their current values, so d(loss)/d(phi_norm) matches the closed forms.
struct ErrorEvidenceVars {
    ad::Var delta_norm;                    // constant
    ad::Var phi_norm;                      // differentiable via upsilon, alpha
    std::vector<ErrorEvidencePair> pairs;  // plain mirror, for logging
};

inline ErrorEvidenceVars error_evidence_graph(const EvidentialVars& ev,
                                              std::span<const double> targets,
                                              NormalizationMode mode) {
    using namespace ad;
    Tape& t = *ev.gamma.tape;
    const std::size_t n = ev.gamma.value().rows;
    if (targets.size() != n)
        throw std::invalid_argument("error_evidence_graph: target count mismatch");

    std::vector<NIGParams> params(n);
    for (std::size_t i = 0; i < n; ++i)
        params[i] = {ev.gamma.value().at(i, 0), ev.upsilon.value().at(i, 0),
                     ev.alpha.value().at(i, 0), ev.beta.value().at(i, 0)};
    auto pairs = build_error_evidence_pairs(targets, params, mode);

    Matrix delta_norm(n, 1);
    for (std::size_t i = 0; i < n; ++i) delta_norm.at(i, 0) = pairs[i].delta_norm;

    Var phi = 2.0 * ev.upsilon + ev.alpha;
    double lo = pairs[0].phi, hi = pairs[0].phi;
    for (const auto& p : pairs) {
        lo = std::min(lo, p.phi);
        hi = std::max(hi, p.phi);
    }
    const double range = hi - lo;
    Var phi_norm = (mode != NormalizationMode::Tanh && range > 0.0)
                       ? div(sub(phi, t.constant(mode == NormalizationMode::StandardMinMax
                                                     ? lo
                                                     : 0.0)),
                             t.constant(range))
                       : tanh(phi);
    return {t.constant(std::move(delta_norm)), phi_norm, std::move(pairs)};
}

/// (phi_norm + delta_norm - 1)^2 for Type I; minus (phi_norm - delta_norm)^2
/// for Type II. Per sample, (n x 1).
inline ad::Var geom_graph(GeomType type, const ad::Var& delta_norm, const ad::Var& phi_norm) {
    using namespace ad;
    Var t = add(phi_norm, delta_norm) - 1.0;
    Var loss = mul(t, t);
    if (type == GeomType::TypeII) {
        Var s = sub(phi_norm, delta_norm);
        loss = sub(loss, mul(s, s));
    }
    return loss;
}

/// lambda_nll * NLL + lambda_geom * Geom per sample, (n x 1); the tape twin
/// of evidential_loss applied batch-wide.
inline ad::Var evidential_terms_graph(const EvidentialVars& ev, std::span<const double> targets,
                                      const LossWeights& weights, NormalizationMode mode,
                                      std::vector<ErrorEvidencePair>* pairs_out = nullptr) {
    using namespace ad;
    validate(weights);
    Tape& t = *ev.gamma.tape;
    Matrix targets_col(targets.size(), 1, std::vector<double>(targets.begin(), targets.end()));
    Var nll = nll_loss_graph(ev, t.constant(std::move(targets_col)));
    auto coords = error_evidence_graph(ev, targets, mode);
    if (pairs_out) *pairs_out = coords.pairs;
    Var geom = geom_graph(weights.geom_type, coords.delta_norm, coords.phi_norm);
    return add(affine(nll, weights.lambda_nll, 0.0), affine(geom, weights.lambda_geom, 0.0));
}

/// grounding + lambda_der * (2/N) * sum(evidential terms), scalar.
inline ad::Var total_loss_graph(const ad::Var& grounding, const ad::Var& evidential_terms,
                                const LossWeights& weights) {
    using namespace ad;
    validate(weights);
    const double n = static_cast<double>(evidential_terms.value().rows);
    if (n == 0.0) throw std::domain_error("total_loss_graph: no evidential terms");
    return add(grounding, affine(sum(evidential_terms), weights.lambda_der * (2.0 / n), 0.0));
}

/// Focal loss over a column of probabilities; targets are fixed 0/1 labels.
inline ad::Var focal_loss_graph(const ad::Var& pred, std::span<const int> targets,
                                double gamma = 2.0, double alpha = 0.9,
                                bool positive_only = false) {
    using namespace ad;
    Tape& t = *pred.tape;
    const std::size_t n = pred.value().rows;
    if (pred.value().cols != 1)
        throw std::invalid_argument("focal_loss_graph: predictions must be a column");
    if (targets.size() != n)
        throw std::invalid_argument("focal_loss_graph: one target per prediction required");
    Matrix mask(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] != 0 && targets[i] != 1)
            throw std::invalid_argument("focal_loss_graph: target must be 0 or 1");
        mask.at(i, 0) = static_cast<double>(targets[i]);
    }
    const double eps = 1e-7;
    Var p = clamp(pred, eps, 1.0 - eps);
    Var pos = affine(mul(pow_const(1.0 - p, gamma), log(p)), -alpha, 0.0);
    Var m = t.constant(std::move(mask));
    if (positive_only) return mul(m, pos);
    Var neg = affine(mul(pow_const(p, gamma), log(1.0 - p)), -(1.0 - alpha), 0.0);
    return add(mul(m, pos), mul(1.0 - m, neg));
}

/// Spans as paired columns on the tape.
struct SpanVars {
    ad::Var start;
    ad::Var end;
};

/// Elementwise 1-D gIoU of paired spans. Degenerate unions/hulls are floored
/// at a tiny width instead of branching, which matches the plain function
/// everywhere spans have positive length.
inline ad::Var giou_1d_graph(const SpanVars& a, const SpanVars& b) {
    using namespace ad;
    const double tiny = 1e-12;
    Var inter = max_const(sub(vmin(a.end, b.end), vmax(a.start, b.start)), 0.0);
    Var uni = max_const(sub(add(sub(a.end, a.start), sub(b.end, b.start)), inter), tiny);
    Var hull = max_const(sub(vmax(a.end, b.end), vmin(a.start, b.start)), tiny);
    Var iou = div(inter, uni);
    return sub(iou, div(sub(hull, uni), hull));
}

/// Foreground-gated boundary term: lambda_l1 * smooth L1 of offsets +
/// lambda_iou * (1 - gIoU). `foreground` masks background rows to zero.
inline ad::Var boundary_loss_graph(const SpanVars& pred_offsets, const SpanVars& true_offsets,
                                   const SpanVars& pred_span, const SpanVars& true_span,
                                   std::span<const int> foreground,
                                   const GroundingWeights& weights) {
    using namespace ad;
    validate(weights);
    Tape& t = *pred_offsets.start.tape;
    const std::size_t n = pred_offsets.start.value().rows;
    if (foreground.size() != n)
        throw std::invalid_argument("boundary_loss_graph: one flag per row required");
    Matrix mask(n, 1);
    for (std::size_t i = 0; i < n; ++i) mask.at(i, 0) = foreground[i] ? 1.0 : 0.0;
    Var l1 = add(smooth_l1(sub(pred_offsets.start, true_offsets.start)),
                 smooth_l1(sub(pred_offsets.end, true_offsets.end)));
    Var giou_term = 1.0 - giou_1d_graph(pred_span, true_span);
    Var per_row = add(affine(l1, weights.lambda_l1, 0.0), affine(giou_term, weights.lambda_iou, 0.0));
    return mul(t.constant(std::move(mask)), per_row);
}

/// Cosine similarity of each video token row against the sentence vector,
/// (L x 1). Norms are floored at a tiny value instead of throwing.
inline ad::Var saliency_scores_graph(const ad::Var& video, const ad::Var& sentence) {
    using namespace ad;
    if (video.value().cols != sentence.value().cols || sentence.value().rows != 1)
        throw std::invalid_argument("saliency_scores_graph: sentence must be 1 x dim of video");
    const double tiny = 1e-12;
    Var dots = matmul(video, transpose(sentence));
    Var v_norms = sqrt(max_const(sum_rows(mul(video, video)), tiny));
    Var s_norm = sqrt(max_const(sum_rows(mul(sentence, sentence)), tiny));
    return div(dots, mul(v_norms, s_norm));
}

namespace graph_detail {
/// log-sum-exp over selected rows of a score column, via a one-hot selection
/// constant; returns 1x1.
inline ad::Var select_lse(const ad::Var& scores, std::span<const std::size_t> rows, double tau) {
    using namespace ad;
    Tape& t = *scores.tape;
    const std::size_t n = scores.value().rows;
    Matrix sel(rows.size(), n);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) throw std::out_of_range("contrastive: score index out of range");
        sel.at(r, rows[r]) = 1.0;
    }
    Var picked = matmul(t.constant(std::move(sel)), scores);
    return log_sum_exp_rows(transpose(affine(picked, 1.0 / tau, 0.0)));
}

inline ad::Var select_one(const ad::Var& scores, std::size_t row) {
    using namespace ad;
    Tape& t = *scores.tape;
    const std::size_t n = scores.value().rows;
    if (row >= n) throw std::out_of_range("contrastive: positive index out of range");
    Matrix sel(1, n);
    sel.at(0, row) = 1.0;
    return matmul(t.constant(std::move(sel)), scores);
}
}  // namespace graph_detail

/// InfoNCE over one video's clip scores (column, L x 1): positive against an
/// explicit negative set.
inline ad::Var intra_video_contrastive_graph(const ad::Var& scores, std::size_t positive_index,
                                             std::span<const std::size_t> negative_set,
                                             double tau) {
    using namespace ad;
    if (!(tau > 0.0)) throw std::domain_error("intra contrastive: tau must be > 0");
    std::vector<std::size_t> rows;
    rows.reserve(negative_set.size() + 1);
    rows.push_back(positive_index);
    rows.insert(rows.end(), negative_set.begin(), negative_set.end());
    Var lse = graph_detail::select_lse(scores, rows, tau);
    return sub(lse, affine(graph_detail::select_one(scores, positive_index), 1.0 / tau, 0.0));
}

/// InfoNCE over the batch's positive scores (column, B x 1).
inline ad::Var inter_video_contrastive_graph(const ad::Var& batch_scores,
                                             std::size_t positive_index, double tau) {
    using namespace ad;
    if (!(tau > 0.0)) throw std::domain_error("inter contrastive: tau must be > 0");
    const std::size_t n = batch_scores.value().rows;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    Var lse = graph_detail::select_lse(batch_scores, rows, tau);
    return sub(lse, affine(graph_detail::select_one(batch_scores, positive_index), 1.0 / tau, 0.0));
}

/// -(1/K) * trace(pos * neg^T) over equal-shape score blocks.
inline ad::Var clip_trace_contrastive_graph(const ad::Var& pos, const ad::Var& neg) {
    using namespace ad;
    if (pos.value().rows == 0) throw std::domain_error("trace contrastive: K must be >= 1");
    return affine(sum(mul(pos, neg)), -1.0 / static_cast<double>(pos.value().rows), 0.0);
}

/// Mean over masked rows of -log softmax(logits)[target].
inline ad::Var mlm_loss_graph(const ad::Var& logits, std::span<const std::size_t> targets) {
    using namespace ad;
    Tape& t = *logits.tape;
    const Matrix& lv = logits.value();
    if (lv.rows == 0) throw std::domain_error("mlm_loss_graph: need at least one masked row");
    if (targets.size() != lv.rows)
        throw std::invalid_argument("mlm_loss_graph: one target per logit row required");
    Matrix onehot(lv.rows, lv.cols);
    for (std::size_t i = 0; i < lv.rows; ++i) {
        if (targets[i] >= lv.cols)
            throw std::out_of_range("mlm_loss_graph: target id outside vocabulary");
        onehot.at(i, targets[i]) = 1.0;
    }
    Var picked = sum_rows(mul(logits, t.constant(std::move(onehot))));
    return mean(sub(log_sum_exp_rows(logits), picked));
}

/// Per-sample grounding head terms as 1x1 tape nodes.
struct GroundingTermVars {
    ad::Var focal;
    ad::Var boundary;
    ad::Var intra;
    ad::Var inter;
    ad::Var trace;
};

/// (1/N) * sum_i (L_f + L_b + lambda_inter * L_inter + lambda_intra *
/// (L_intra + L_trace)); the tape twin of grounding_loss.
inline ad::Var grounding_loss_graph(std::span<const GroundingTermVars> per_clip,
                                    const GroundingWeights& weights) {
    using namespace ad;
    validate(weights);
    if (per_clip.empty()) throw std::domain_error("grounding_loss_graph: empty clip set");
    std::vector<Var> totals;
    totals.reserve(per_clip.size());
    for (const auto& terms : per_clip) {
        Var saliency = add(affine(terms.inter, weights.lambda_inter, 0.0),
                           affine(add(terms.intra, terms.trace), weights.lambda_intra, 0.0));
        totals.push_back(add(add(terms.focal, terms.boundary), saliency));
    }
    return mean(vstack(std::span<const Var>(totals.data(), totals.size())));
}

}  // namespace evreg
