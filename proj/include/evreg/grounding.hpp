#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evreg/attention.hpp"
#include "evreg/matrix.hpp"
#include "evreg/specials.hpp"

namespace evreg {

struct Span {
    double start = 0.0;
    double end = 0.0;
};

inline void validate(const Span& s) {
    if (!(std::isfinite(s.start) && std::isfinite(s.end)) || s.start > s.end)
        throw std::domain_error("span: require finite start <= end");
}

/// Per-clip supervision: foreground flag, saliency in [0,1], and (left,
/// right) boundary offsets that are meaningful only when foreground is set.
struct ClipLabel {
    int foreground = 0;
    double saliency = 0.0;
    std::pair<double, double> offsets{0.0, 0.0};
};

struct GroundingWeights {
    double lambda_l1 = 1.0;
    double lambda_iou = 1.0;
    double lambda_f = 1.0;
    double lambda_inter = 1.0;
    double lambda_intra = 1.0;
    double tau = 0.07;
    std::size_t top_k = 4;
};

inline void validate(const GroundingWeights& w) {
    if (w.lambda_l1 < 0.0 || w.lambda_iou < 0.0 || w.lambda_f < 0.0 || w.lambda_inter < 0.0 ||
        w.lambda_intra < 0.0)
        throw std::domain_error("grounding weights must be non-negative");
    if (!(w.tau > 0.0)) throw std::domain_error("grounding weights: tau must be > 0");
}

/// target=1 -> -alpha (1-p)^gamma log p (the published branch); target=0 ->
/// -(1-alpha) p^gamma log(1-p), the standard completion. `positive_only`
/// drops the completion for a literal positive-term-only loss.
inline double focal_loss(double pred, int target, double gamma = 2.0, double alpha = 0.9,
                         bool positive_only = false) {
    if (!(pred >= 0.0 && pred <= 1.0))
        throw std::domain_error("focal_loss: pred must be in [0,1], got " + std::to_string(pred));
    if (target != 0 && target != 1)
        throw std::invalid_argument("focal_loss: target must be 0 or 1");
    const double eps = 1e-7;
    const double p = std::clamp(pred, eps, 1.0 - eps);
    if (target == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    if (positive_only) return 0.0;
    return -(1.0 - alpha) * std::pow(p, gamma) * std::log1p(-p);
}

/// Elementwise smooth L1 (transition at 1), summed over the two offsets.
inline double smooth_l1(const std::pair<double, double>& pred,
                        const std::pair<double, double>& target) {
    auto piece = [](double d) {
        const double a = std::abs(d);
        return a < 1.0 ? 0.5 * a * a : a - 0.5;
    };
    return piece(pred.first - target.first) + piece(pred.second - target.second);
}

inline double iou_1d(const Span& a, const Span& b) {
    validate(a);
    validate(b);
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = (a.end - a.start) + (b.end - b.start) - inter;
    if (uni <= 0.0) return (a.start == b.start && a.end == b.end) ? 1.0 : 0.0;
    return inter / uni;
}

/// IoU minus the hull-gap ratio |hull \ union| / |hull|; range (-1, 1].
/// Point-set corner cases: identical points give 1, disjoint points give 0.
inline double giou_1d(const Span& a, const Span& b) {
    const double iou = iou_1d(a, b);
    const double hull = std::max(a.end, b.end) - std::min(a.start, b.start);
    if (hull <= 0.0) return iou;
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = (a.end - a.start) + (b.end - b.start) - inter;
    if (uni <= 0.0) return iou;
    return iou - (hull - uni) / hull;
}

/// Foreground-gated boundary regression: lambda_l1 * SmoothL1(offsets) +
/// lambda_iou * (1 - gIoU(spans)); background clips contribute 0.
inline double boundary_loss(const std::pair<double, double>& pred_offsets,
                            const std::pair<double, double>& true_offsets, const Span& pred_span,
                            const Span& true_span, int foreground,
                            const GroundingWeights& weights) {
    validate(weights);
    if (foreground == 0) return 0.0;
    return weights.lambda_l1 * smooth_l1(pred_offsets, true_offsets) +
           weights.lambda_iou * (1.0 - giou_1d(pred_span, true_span));
}

/// Cosine similarity of every video token against the sentence vector.
inline std::vector<double> saliency_scores(const FeatureSequence& video,
                                           std::span<const double> sentence) {
    if (video.dim() != sentence.size())
        throw std::invalid_argument("saliency_scores: dimension mismatch");
    double s_norm = 0.0;
    for (double x : sentence) s_norm += x * x;
    s_norm = std::sqrt(s_norm);
    if (!(s_norm > 0.0)) throw std::domain_error("saliency_scores: zero-norm sentence");
    std::vector<double> out(video.length());
    for (std::size_t i = 0; i < video.length(); ++i) {
        double dot = 0.0, v_norm = 0.0;
        for (std::size_t j = 0; j < video.dim(); ++j) {
            dot += video.tokens.at(i, j) * sentence[j];
            v_norm += video.tokens.at(i, j) * video.tokens.at(i, j);
        }
        v_norm = std::sqrt(v_norm);
        if (!(v_norm > 0.0))
            throw std::domain_error("saliency_scores: zero-norm video token " +
                                    std::to_string(i));
        out[i] = dot / (v_norm * s_norm);
    }
    return out;
}

/// -log( e^{s_p/tau} / (e^{s_p/tau} + sum_{j in negatives} e^{s_j/tau}) ).
inline double intra_video_contrastive(std::span<const double> scores, std::size_t positive_index,
                                      std::span<const std::size_t> negative_set, double tau) {
    if (scores.empty()) throw std::domain_error("intra_video_contrastive: empty scores");
    if (!(tau > 0.0)) throw std::domain_error("intra_video_contrastive: tau must be > 0");
    if (positive_index >= scores.size())
        throw std::out_of_range("intra_video_contrastive: positive index out of range");
    std::vector<double> terms;
    terms.reserve(negative_set.size() + 1);
    terms.push_back(scores[positive_index] / tau);
    for (std::size_t j : negative_set) {
        if (j >= scores.size())
            throw std::out_of_range("intra_video_contrastive: negative index out of range");
        terms.push_back(scores[j] / tau);
    }
    return log_sum_exp(terms) - scores[positive_index] / tau;
}

/// -log( e^{s_p/tau} / sum_k e^{s_k/tau} ) over the batch's positive scores.
inline double inter_video_contrastive(std::span<const double> batch_scores,
                                      std::size_t positive_index, double tau) {
    if (batch_scores.empty()) throw std::domain_error("inter_video_contrastive: empty batch");
    if (!(tau > 0.0)) throw std::domain_error("inter_video_contrastive: tau must be > 0");
    if (positive_index >= batch_scores.size())
        throw std::out_of_range("inter_video_contrastive: positive index out of range");
    std::vector<double> terms(batch_scores.size());
    for (std::size_t i = 0; i < batch_scores.size(); ++i) terms[i] = batch_scores[i] / tau;
    return log_sum_exp(terms) - batch_scores[positive_index] / tau;
}

/// -(1/K) * trace(pos * neg^T): pushes the K strongest clips away from the K
/// weakest, row by row.
inline double clip_trace_contrastive(const Matrix& pos, const Matrix& neg) {
    if (pos.rows == 0) throw std::domain_error("clip_trace_contrastive: K must be >= 1");
    if (pos.rows != neg.rows || pos.cols != neg.cols)
        throw std::invalid_argument("clip_trace_contrastive: shape mismatch");
    double trace = 0.0;
    for (std::size_t i = 0; i < pos.rows; ++i)
        for (std::size_t j = 0; j < pos.cols; ++j) trace += pos.at(i, j) * neg.at(i, j);
    return -trace / static_cast<double>(pos.rows);
}

/// Mean over masked positions of -log softmax(logits)[target].
inline double mlm_loss(const Matrix& logits, std::span<const std::size_t> targets) {
    if (logits.rows == 0) throw std::domain_error("mlm_loss: need at least one masked position");
    if (targets.size() != logits.rows)
        throw std::invalid_argument("mlm_loss: one target per logit row required");
    double total = 0.0;
    std::vector<double> row(logits.cols);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        if (targets[i] >= logits.cols)
            throw std::out_of_range("mlm_loss: target id " + std::to_string(targets[i]) +
                                    " outside vocabulary of " + std::to_string(logits.cols));
        for (std::size_t j = 0; j < logits.cols; ++j) row[j] = logits.at(i, j);
        total += log_sum_exp(row) - logits.at(i, targets[i]);
    }
    return total / static_cast<double>(logits.rows);
}

/// Raw per-clip head losses; the saliency compound L_s is assembled inside
/// grounding_loss so its weights stay in one place.
struct GroundingClipTerms {
    double focal = 0.0;
    double boundary = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double trace = 0.0;
};

/// (1/N) * sum_i (L_f + L_b + L_s), with
/// L_s = lambda_inter * L_inter + lambda_intra * (L_intra + L_v).
inline double grounding_loss(std::span<const GroundingClipTerms> per_clip,
                             const GroundingWeights& weights) {
    validate(weights);
    if (per_clip.empty()) throw std::domain_error("grounding_loss: empty clip set");
    double total = 0.0;
    for (const auto& t : per_clip) {
        const double saliency =
            weights.lambda_inter * t.inter + weights.lambda_intra * (t.intra + t.trace);
        total += t.focal + t.boundary + saliency;
    }
    return total / static_cast<double>(per_clip.size());
}

struct ScoredSpan {
    Span span;
    double confidence = 0.0;
};

/// Greedy descending-confidence suppression: a span is dropped when its IoU
/// with any kept span exceeds the threshold. Kept spans are returned ordered
/// by confidence, ties broken by start time.
inline std::vector<ScoredSpan> nms_1d(std::span<const ScoredSpan> spans, double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
        throw std::domain_error("nms_1d: threshold must be in (0,1]");
    std::vector<std::size_t> order(spans.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (spans[a].confidence != spans[b].confidence)
            return spans[a].confidence > spans[b].confidence;
        return spans[a].span.start < spans[b].span.start;
    });
    std::vector<ScoredSpan> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (iou_1d(spans[idx].span, k.span) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(spans[idx]);
    }
    return kept;
}

}  // namespace evreg
