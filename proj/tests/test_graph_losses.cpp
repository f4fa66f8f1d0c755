#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "evreg/autodiff.hpp"
#include "evreg/graph_losses.hpp"
#include "evreg/grounding.hpp"
#include "evreg/matrix.hpp"
#include "evreg/nig.hpp"
#include "evreg/nn.hpp"
#include "evreg/numdiff.hpp"
#include "evreg/regularizers.hpp"
#include "evreg/rng.hpp"

using evreg::Matrix;
using evreg::Rng;
using namespace evreg::ad;

namespace {

double guarded_rel(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

/// Tape gradient of a composite vs finite differences of an independently
/// written plain-double version of the same computation.
void check_against_plain(const std::vector<double>& x0,
                         const std::function<std::pair<Var, Var>(Tape&)>& build_input_and_loss,
                         const std::function<double(const std::vector<double>&)>& plain,
                         double tol = 1e-5, double h = 1e-5) {
    Tape t;
    auto [input, loss] = build_input_and_loss(t);
    REQUIRE_THAT(loss.scalar(), Catch::Matchers::WithinRel(plain(x0), 1e-10));
    t.backward(loss);
    const Matrix g = input.grad();
    const std::vector<double> fd = evreg::finite_difference(plain, x0, h);
    for (std::size_t i = 0; i < fd.size(); ++i) {
        INFO("coordinate " << i << ": tape=" << g.data[i] << " fd=" << fd[i]);
        REQUIRE(guarded_rel(g.data[i], fd[i]) < tol);
    }
}

evreg::EvidentialVars head_from_raw(Tape& t, const Var& raw) {
    return evreg::evidential_head(raw);
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace

TEST_CASE("tape NLL matches the scalar loss per sample") {
    Rng rng(0x91);
    const std::size_t n = 6;
    Matrix raw(n, 4);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) raw.at(i, j) = rng.uniform(-2.0, 2.0);
        targets[i] = rng.uniform(-3.0, 3.0);
    }
    Tape t;
    Var raw_var = t.input(raw);
    auto ev = evreg::evidential_head(raw_var);
    Matrix tcol(n, 1, targets);
    Var nll = evreg::nll_loss_graph(ev, t.constant(tcol));
    const auto params = evreg::nig_params_from_raw(raw);
    for (std::size_t i = 0; i < n; ++i) {
        REQUIRE_THAT(nll.value().at(i, 0),
                     Catch::Matchers::WithinRel(evreg::nll_loss(targets[i], params[i]), 1e-12));
    }
}

TEST_CASE("tape NLL gradients through the evidential head match finite differences") {
    Rng rng(0x92);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 4;
        const std::vector<double> x0 = random_vector(rng, n * 4, -1.5, 1.5);
        const std::vector<double> targets = random_vector(rng, n, -2.0, 2.0);
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var raw = t.input(Matrix(n, 4, x0));
                auto ev = head_from_raw(t, raw);
                Matrix tcol(n, 1, targets);
                return std::pair{raw, mean(evreg::nll_loss_graph(ev, t.constant(tcol)))};
            },
            [&](const std::vector<double>& v) {
                const auto params = evreg::nig_params_from_raw(Matrix(n, 4, v));
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    total += evreg::nll_loss(targets[i], params[i]);
                return total / static_cast<double>(n);
            });
    }
}

TEST_CASE("normalized error/evidence coordinates equal the plain batch builder exactly") {
    Rng rng(0x93);
    const std::size_t n = 8;
    Matrix raw(n, 4);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) raw.at(i, j) = rng.uniform(-2.0, 2.0);
        targets[i] = rng.uniform(-2.0, 2.0);
    }
    for (auto mode : {evreg::NormalizationMode::StandardMinMax, evreg::NormalizationMode::Tanh}) {
        Tape t;
        Var raw_var = t.input(raw);
        auto ev = evreg::evidential_head(raw_var);
        auto coords = evreg::error_evidence_graph(ev, targets, mode);
        const auto plain =
            evreg::build_error_evidence_pairs(targets, evreg::nig_params_from_raw(raw), mode);
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(coords.delta_norm.value().at(i, 0) == plain[i].delta_norm);
            REQUIRE(coords.phi_norm.value().at(i, 0) == plain[i].phi_norm);
            REQUIRE(coords.pairs[i].phi == plain[i].phi);
        }
    }
}

TEST_CASE("tape geom penalties match the closed forms and their evidence derivative") {
    Rng rng(0x94);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5;
        const std::vector<double> phi0 = random_vector(rng, n, 0.05, 0.95);
        const std::vector<double> delta0 = random_vector(rng, n, 0.05, 0.95);
        for (auto type : {evreg::GeomType::TypeI, evreg::GeomType::TypeII}) {
            check_against_plain(
                phi0,
                [&](Tape& t) {
                    Var phi = t.input(Matrix(n, 1, phi0));
                    Var delta = t.constant(Matrix(n, 1, delta0));
                    return std::pair{phi, mean(evreg::geom_graph(type, delta, phi))};
                },
                [&](const std::vector<double>& v) {
                    double total = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                        total += type == evreg::GeomType::TypeI
                                     ? evreg::geom_type1(delta0[i], v[i])
                                     : evreg::geom_type2(delta0[i], v[i]);
                    return total / static_cast<double>(n);
                },
                1e-6, 1e-6);
        }
    }
}

TEST_CASE("geom gradients through the head respect frozen batch statistics") {
    Rng rng(0x95);
    const std::size_t n = 5;
    const std::vector<double> x0 = random_vector(rng, n * 4, -1.0, 1.0);
    const std::vector<double> targets = random_vector(rng, n, -2.0, 2.0);
    const auto mode = evreg::NormalizationMode::StandardMinMax;

    // Freeze the normalization statistics and error coordinates at the base
    // point, then differentiate only the evidence path, as the stop-gradient
    // contract prescribes.
    const auto base_params = evreg::nig_params_from_raw(Matrix(n, 4, x0));
    const auto base_pairs = evreg::build_error_evidence_pairs(targets, base_params, mode);
    double lo = base_pairs[0].phi, hi = base_pairs[0].phi;
    for (const auto& p : base_pairs) {
        lo = std::min(lo, p.phi);
        hi = std::max(hi, p.phi);
    }
    for (auto type : {evreg::GeomType::TypeI, evreg::GeomType::TypeII}) {
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var raw = t.input(Matrix(n, 4, x0));
                auto ev = evreg::evidential_head(raw);
                auto coords = evreg::error_evidence_graph(ev, targets, mode);
                return std::pair{raw,
                                 mean(evreg::geom_graph(type, coords.delta_norm, coords.phi_norm))};
            },
            [&](const std::vector<double>& v) {
                const auto params = evreg::nig_params_from_raw(Matrix(n, 4, v));
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double phi_norm = (evreg::evidence(params[i]) - lo) / (hi - lo);
                    const double s = phi_norm - base_pairs[i].delta_norm;
                    const double u = phi_norm + base_pairs[i].delta_norm - 1.0;
                    total += type == evreg::GeomType::TypeI ? u * u : u * u - s * s;
                }
                return total / static_cast<double>(n);
            });
    }
}

TEST_CASE("geom losses send exactly zero gradient into the location parameter") {
    Rng rng(0x96);
    const std::size_t n = 6;
    Matrix raw(n, 4);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) raw.at(i, j) = rng.uniform(-1.5, 1.5);
        targets[i] = rng.uniform(-2.0, 2.0);
    }
    for (auto type : {evreg::GeomType::TypeI, evreg::GeomType::TypeII}) {
        Tape t;
        Var raw_var = t.input(raw);
        auto ev = evreg::evidential_head(raw_var);
        auto coords =
            evreg::error_evidence_graph(ev, targets, evreg::NormalizationMode::StandardMinMax);
        t.backward(mean(evreg::geom_graph(type, coords.delta_norm, coords.phi_norm)));
        const Matrix g = raw_var.grad();
        double evidence_path = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(g.at(i, 0) == 0.0);  // location
            REQUIRE(g.at(i, 3) == 0.0);  // beta feeds neither coordinate
            evidence_path += std::abs(g.at(i, 1)) + std::abs(g.at(i, 2));
        }
        REQUIRE(evidence_path > 0.0);  // the evidence path stays live
    }
}

TEST_CASE("adding a geom term leaves the location gradient bit-identical to NLL alone") {
    Rng rng(0x97);
    const std::size_t n = 5;
    Matrix raw(n, 4);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) raw.at(i, j) = rng.uniform(-1.0, 1.0);
        targets[i] = rng.uniform(-2.0, 2.0);
    }
    auto run = [&](double lambda_geom) {
        Tape t;
        Var raw_var = t.input(raw);
        auto ev = evreg::evidential_head(raw_var);
        evreg::LossWeights w;
        w.lambda_geom = lambda_geom;
        Var terms = evreg::evidential_terms_graph(ev, targets, w,
                                                  evreg::NormalizationMode::StandardMinMax);
        t.backward(mean(terms));
        return raw_var.grad();
    };
    const Matrix with_geom = run(1.0);
    const Matrix without_geom = run(0.0);
    for (std::size_t i = 0; i < n; ++i)
        REQUIRE(with_geom.at(i, 0) == without_geom.at(i, 0));
}

TEST_CASE("tape focal loss matches the scalar version and finite differences") {
    Rng rng(0x98);
    const std::vector<int> targets = {1, 0, 1, 1, 0, 0};
    const std::size_t n = targets.size();
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> x0 = random_vector(rng, n, -2.5, 2.5);
        for (bool positive_only : {false, true}) {
            check_against_plain(
                x0,
                [&](Tape& t) {
                    Var x = t.input(Matrix(n, 1, x0));
                    Var loss = mean(evreg::focal_loss_graph(sigmoid(x), targets, 2.0, 0.9,
                                                            positive_only));
                    return std::pair{x, loss};
                },
                [&](const std::vector<double>& v) {
                    double total = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                        total += evreg::focal_loss(evreg::sigmoid(v[i]), targets[i], 2.0, 0.9,
                                                   positive_only);
                    return total / static_cast<double>(n);
                });
        }
    }
}

TEST_CASE("tape gIoU matches the scalar version and finite differences") {
    Rng rng(0x99);
    for (int trial = 0; trial < 20; ++trial) {
        // (start, length logits) per span pair; lengths through softplus keep
        // spans well-formed for the scalar reference.
        const std::vector<double> x0 = random_vector(rng, 4, -1.0, 1.0);
        const evreg::Span fixed{0.2, 0.7};
        auto spans_from = [&](const std::vector<double>& v) {
            const evreg::Span s{v[0], v[0] + evreg::softplus(v[1]) + 0.05};
            const evreg::Span u{v[2], v[2] + evreg::softplus(v[3]) + 0.05};
            return std::pair{s, u};
        };
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var x = t.input(Matrix(1, 4, x0));
                Var s_start = col(x, 0);
                Var s_end = add(s_start, softplus(col(x, 1)) + 0.05);
                Var u_start = col(x, 2);
                Var u_end = add(u_start, softplus(col(x, 3)) + 0.05);
                Var g = evreg::giou_1d_graph({s_start, s_end}, {u_start, u_end});
                return std::pair{x, sum(g)};
            },
            [&](const std::vector<double>& v) {
                const auto [s, u] = spans_from(v);
                return evreg::giou_1d(s, u);
            });
    }
}

TEST_CASE("tape boundary loss matches the scalar version and finite differences") {
    Rng rng(0x9a);
    evreg::GroundingWeights w;
    const std::vector<int> fg = {1, 0, 1};
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = fg.size();
        // Per row: predicted offsets (left, right) around a fixed center.
        const std::vector<double> x0 = random_vector(rng, 2 * n, -1.2, 1.2);
        const std::vector<double> centers = random_vector(rng, n, 0.3, 0.7);
        const std::vector<double> true_left = random_vector(rng, n, 0.05, 0.25);
        const std::vector<double> true_right = random_vector(rng, n, 0.05, 0.25);
        auto offsets_from = [](double a, double b) {
            return std::pair{evreg::softplus(a) + 0.02, evreg::softplus(b) + 0.02};
        };
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var x = t.input(Matrix(n, 2, x0));
                Var left = softplus(col(x, 0)) + 0.02;
                Var right = softplus(col(x, 1)) + 0.02;
                Var c = t.constant(Matrix(n, 1, centers));
                Var tl = t.constant(Matrix(n, 1, true_left));
                Var tr = t.constant(Matrix(n, 1, true_right));
                evreg::SpanVars pred{sub(c, left), add(c, right)};
                evreg::SpanVars truth{sub(c, tl), add(c, tr)};
                Var loss = evreg::boundary_loss_graph({left, right}, {tl, tr}, pred, truth, fg, w);
                return std::pair{x, mean(loss)};
            },
            [&](const std::vector<double>& v) {
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const auto [l, r] = offsets_from(v[2 * i], v[2 * i + 1]);
                    const evreg::Span pred{centers[i] - l, centers[i] + r};
                    const evreg::Span truth{centers[i] - true_left[i], centers[i] + true_right[i]};
                    total += evreg::boundary_loss({l, r}, {true_left[i], true_right[i]}, pred,
                                                  truth, fg[i], w);
                }
                return total / static_cast<double>(n);
            });
    }
}

TEST_CASE("tape saliency scores equal the scalar cosine similarities") {
    Rng rng(0x9b);
    const std::size_t L = 5, D = 4;
    Matrix video(L, D);
    for (double& v : video.data) v = rng.uniform(-1.0, 1.0);
    Matrix sentence(1, D);
    for (double& v : sentence.data) v = rng.uniform(-1.0, 1.0);
    Tape t;
    Var scores = evreg::saliency_scores_graph(t.input(video), t.input(sentence));
    evreg::FeatureSequence seq{video, evreg::Modality::Video};
    const auto plain = evreg::saliency_scores(seq, sentence.data);
    for (std::size_t i = 0; i < L; ++i)
        REQUIRE_THAT(scores.value().at(i, 0), Catch::Matchers::WithinRel(plain[i], 1e-14));
}

TEST_CASE("tape saliency gradient matches finite differences") {
    Rng rng(0x9c);
    const std::size_t L = 4, D = 3;
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> x0 = random_vector(rng, L * D, 0.2, 1.5);
        const std::vector<double> sent = random_vector(rng, D, 0.2, 1.5);
        const std::vector<double> w = random_vector(rng, L, -1.0, 1.0);
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var video = t.input(Matrix(L, D, x0));
                Var sentence = t.constant(Matrix(1, D, sent));
                Var scores = evreg::saliency_scores_graph(video, sentence);
                return std::pair{video, sum(mul(scores, t.constant(Matrix(L, 1, w))))};
            },
            [&](const std::vector<double>& v) {
                evreg::FeatureSequence seq{Matrix(L, D, v), evreg::Modality::Video};
                const auto s = evreg::saliency_scores(seq, sent);
                double total = 0.0;
                for (std::size_t i = 0; i < L; ++i) total += w[i] * s[i];
                return total;
            });
    }
}

TEST_CASE("tape contrastive losses match scalar versions and finite differences") {
    Rng rng(0x9d);
    const double tau = 0.07;
    const std::vector<std::size_t> negatives = {0, 2, 5};
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 6;
        const std::vector<double> x0 = random_vector(rng, n, -1.0, 1.0);
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var s = t.input(Matrix(n, 1, x0));
                return std::pair{s, sum(evreg::intra_video_contrastive_graph(s, 3, negatives,
                                                                             tau))};
            },
            [&](const std::vector<double>& v) {
                return evreg::intra_video_contrastive(v, 3, negatives, tau);
            });
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var s = t.input(Matrix(n, 1, x0));
                return std::pair{s, sum(evreg::inter_video_contrastive_graph(s, 2, tau))};
            },
            [&](const std::vector<double>& v) {
                return evreg::inter_video_contrastive(v, 2, tau);
            });
    }
}

TEST_CASE("tape trace contrastive matches the scalar version and finite differences") {
    Rng rng(0x9e);
    const std::size_t K = 3, D = 4;
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> x0 = random_vector(rng, 2 * K * D, -1.0, 1.0);
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var x = t.input(Matrix(2 * K, D, x0));
                // Top rows are the positives, bottom rows the negatives.
                Matrix top(K, 2 * K), bottom(K, 2 * K);
                for (std::size_t i = 0; i < K; ++i) {
                    top.at(i, i) = 1.0;
                    bottom.at(i, K + i) = 1.0;
                }
                Var pos = matmul(t.constant(top), x);
                Var neg = matmul(t.constant(bottom), x);
                return std::pair{x, evreg::clip_trace_contrastive_graph(pos, neg)};
            },
            [&](const std::vector<double>& v) {
                Matrix pos(K, D), neg(K, D);
                for (std::size_t i = 0; i < K; ++i)
                    for (std::size_t j = 0; j < D; ++j) {
                        pos.at(i, j) = v[i * D + j];
                        neg.at(i, j) = v[(K + i) * D + j];
                    }
                return evreg::clip_trace_contrastive(pos, neg);
            });
    }
}

TEST_CASE("tape MLM loss matches the scalar version and finite differences") {
    Rng rng(0x9f);
    const std::vector<std::size_t> targets = {2, 0, 4};
    const std::size_t M = targets.size(), V = 5;
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> x0 = random_vector(rng, M * V, -2.0, 2.0);
        check_against_plain(
            x0,
            [&](Tape& t) {
                Var logits = t.input(Matrix(M, V, x0));
                return std::pair{logits, evreg::mlm_loss_graph(logits, targets)};
            },
            [&](const std::vector<double>& v) {
                return evreg::mlm_loss(Matrix(M, V, v), targets);
            });
    }
}

TEST_CASE("tape grounding composition equals the scalar composition") {
    Rng rng(0xa0);
    evreg::GroundingWeights w;
    w.lambda_intra = 0.7;
    w.lambda_inter = 1.3;
    const std::size_t n = 4;
    std::vector<evreg::GroundingClipTerms> plain(n);
    Tape t;
    std::vector<evreg::GroundingTermVars> vars;
    for (auto& term : plain) {
        term = {rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0),
                rng.uniform(0.0, 2.0), rng.uniform(-1.0, 1.0)};
        vars.push_back({t.constant(term.focal), t.constant(term.boundary),
                        t.constant(term.intra), t.constant(term.inter),
                        t.constant(term.trace)});
    }
    Var loss = evreg::grounding_loss_graph(vars, w);
    REQUIRE_THAT(loss.scalar(),
                 Catch::Matchers::WithinRel(evreg::grounding_loss(plain, w), 1e-14));
}

TEST_CASE("tape total loss equals the scalar composition") {
    evreg::LossWeights w;
    Tape t;
    const std::vector<double> terms = {1.2, 0.4, 2.2, 0.9};
    Var terms_var = t.constant(Matrix(4, 1, terms));
    Var total = evreg::total_loss_graph(t.constant(3.5), terms_var, w);
    REQUIRE_THAT(total.scalar(),
                 Catch::Matchers::WithinRel(evreg::total_loss(3.5, terms, w), 1e-14));
}

TEST_CASE("full MLP with evidential head passes a gradient check") {
    evreg::MLPConfig config{{1, 8, 4}, evreg::Activation::Tanh, 17};
    auto params = evreg::init_mlp(config);
    const std::vector<double> xs = {-1.0, 0.3, 1.4};
    const std::vector<double> ys = {-0.8, 0.1, 2.0};
    std::vector<double> theta;
    for (const auto& p : params) theta.insert(theta.end(), p.value.data.begin(), p.value.data.end());

    auto loss_at = [&](const std::vector<double>& flat) {
        auto local = params;
        std::size_t pos = 0;
        for (auto& p : local) {
            std::copy(flat.begin() + static_cast<long>(pos),
                      flat.begin() + static_cast<long>(pos + p.value.data.size()),
                      p.value.data.begin());
            pos += p.value.data.size();
        }
        const Matrix raw = evreg::mlp_forward(config, local, Matrix(3, 1, xs));
        const auto nig = evreg::nig_params_from_raw(raw);
        double total = 0.0;
        for (std::size_t i = 0; i < nig.size(); ++i) total += evreg::nll_loss(ys[i], nig[i]);
        return total / 3.0;
    };

    Tape t;
    std::vector<Var> pvars;
    for (const auto& p : params) pvars.push_back(t.input(p.value));
    Var raw = evreg::mlp_forward(config, pvars, t.constant(Matrix(3, 1, xs)));
    auto ev = evreg::evidential_head(raw);
    Var loss = mean(evreg::nll_loss_graph(ev, t.constant(Matrix(3, 1, ys))));
    REQUIRE_THAT(loss.scalar(), Catch::Matchers::WithinRel(loss_at(theta), 1e-12));
    t.backward(loss);

    const std::vector<double> fd = evreg::finite_difference(loss_at, theta, 1e-5);
    std::size_t pos = 0;
    for (const auto& v : pvars) {
        const Matrix g = v.grad();
        for (double gi : g.data) {
            INFO("flat index " << pos);
            REQUIRE(guarded_rel(gi, fd[pos]) < 1e-4);
            ++pos;
        }
    }
}

TEST_CASE("evidential head emits valid parameters for any finite raw values") {
    Rng rng(0xa1);
    Matrix raw(64, 4);
    for (double& v : raw.data) v = rng.uniform(-50.0, 50.0);
    raw.at(0, 1) = 1e6;
    raw.at(0, 2) = -1e6;
    raw.at(1, 1) = -1e6;
    raw.at(1, 2) = 1e6;
    raw.at(2, 3) = -1e6;
    raw.at(3, 3) = 1e6;
    for (const auto& p : evreg::nig_params_from_raw(raw)) {
        REQUIRE(std::isfinite(p.gamma));
        REQUIRE(p.upsilon > 0.0);
        REQUIRE(p.alpha > 1.0);
        REQUIRE(p.beta > 0.0);
    }
}
