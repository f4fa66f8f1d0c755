#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "evreg/numdiff.hpp"
#include "evreg/regularizers.hpp"
#include "evreg/rng.hpp"

using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("normalize_batch modes") {
    const std::vector<double> v{2.0, 4.0, 6.0};
    const auto standard = evreg::normalize_batch(v, evreg::NormalizationMode::StandardMinMax);
    REQUIRE(standard == std::vector<double>{0.0, 0.5, 1.0});
    const auto paper = evreg::normalize_batch(v, evreg::NormalizationMode::PaperMinMax);
    REQUIRE(paper == std::vector<double>{0.5, 1.0, 1.5});
    const auto t = evreg::normalize_batch(std::vector<double>{0.0}, evreg::NormalizationMode::Tanh);
    REQUIRE(t == std::vector<double>{0.0});
}

TEST_CASE("normalize_batch rejects empty and degenerate input") {
    REQUIRE_THROWS_AS(
        evreg::normalize_batch(std::vector<double>{}, evreg::NormalizationMode::Tanh),
        std::domain_error);
    const std::vector<double> flat{3.0, 3.0, 3.0};
    REQUIRE_THROWS_AS(evreg::normalize_batch(flat, evreg::NormalizationMode::StandardMinMax),
                      std::domain_error);
    REQUIRE_THROWS_AS(evreg::normalize_batch(flat, evreg::NormalizationMode::PaperMinMax),
                      std::domain_error);

    const auto fallback =
        evreg::normalize_batch_or_tanh(flat, evreg::NormalizationMode::StandardMinMax);
    for (double x : fallback) REQUIRE(x == std::tanh(3.0));
    const auto single =
        evreg::normalize_batch_or_tanh(std::vector<double>{1.0},
                                       evreg::NormalizationMode::StandardMinMax);
    REQUIRE(single == std::vector<double>{std::tanh(1.0)});
}

TEST_CASE("vanilla regularizer is the error-evidence product") {
    REQUIRE(evreg::vanilla_regularizer(0.0, 5.0) == 0.0);
    REQUIRE(evreg::vanilla_regularizer(0.5, 4.0) == 2.0);
    REQUIRE_THROWS_AS(evreg::vanilla_regularizer(-0.1, 1.0), std::domain_error);
    for (double phi : {1.0, 10.0, 100.0}) {
        const double d = evreg::finite_difference_1d(
            [&](double f) { return evreg::vanilla_regularizer(0.3, f); }, phi);
        REQUIRE_THAT(d, WithinAbs(0.3, 1e-9));
        REQUIRE(evreg::minus_grad_phi(evreg::RegularizerKind::Vanilla, 0.3, phi) == -0.3);
    }
}

TEST_CASE("geom type 1 values and argmin") {
    REQUIRE(evreg::geom_type1(0.0, 1.0) == 0.0);
    REQUIRE(evreg::geom_type1(1.0, 1.0) == 1.0);
    REQUIRE_THROWS_AS(evreg::geom_type1(-0.1, 0.5), std::domain_error);
    REQUIRE_THROWS_AS(evreg::geom_type1(0.5, 1.2), std::domain_error);

    double best = 0.0, best_val = evreg::geom_type1(0.3, 0.0);
    for (int i = 0; i <= 100; ++i) {
        const double p = i / 100.0;
        const double val = evreg::geom_type1(0.3, p);
        if (val < best_val) {
            best_val = val;
            best = p;
        }
    }
    REQUIRE_THAT(best, WithinAbs(0.7, 1e-12));
}

TEST_CASE("geom type 1 argmin is one minus delta for random delta") {
    evreg::Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        const double delta = rng.uniform(0.0, 1.0);
        double best = 0.0, best_val = evreg::geom_type1(delta, 0.0);
        for (int i = 0; i <= 1000; ++i) {
            const double p = i / 1000.0;
            const double val = evreg::geom_type1(delta, p);
            if (val < best_val) {
                best_val = val;
                best = p;
            }
        }
        REQUIRE_THAT(best, WithinAbs(1.0 - delta, 1.0 / 1000.0));
    }
}

TEST_CASE("geom type 2 values") {
    REQUIRE(evreg::geom_type2(0.5, 0.5) == 0.0);
    REQUIRE(evreg::geom_type2(0.0, 1.0) == -1.0);
    REQUIRE(evreg::geom_type2(1.0, 1.0) == 1.0);
}

TEST_CASE("geom type 2 is bracketed by type 1") {
    evreg::Rng rng(29);
    for (int i = 0; i < 200; ++i) {
        const double d = rng.uniform(0.0, 1.0), p = rng.uniform(0.0, 1.0);
        const double g1 = evreg::geom_type1(d, p), g2 = evreg::geom_type2(d, p);
        REQUIRE(g2 <= g1 + 1e-15);
        REQUIRE(g2 >= g1 - 1.0 - 1e-15);
    }
}

TEST_CASE("type 1 analytic gradient matches finite differences") {
    evreg::Rng rng(31);
    for (int i = 0; i < 100; ++i) {
        const double d = rng.uniform(0.001, 0.999), p = rng.uniform(0.001, 0.999);
        const double analytic = -2.0 * (d + p - 1.0);
        const double fd = -evreg::finite_difference_1d(
            [&](double pn) { return evreg::geom_type1(d, pn); }, p);
        REQUIRE_THAT(analytic, WithinAbs(fd, 1e-8));
        REQUIRE(evreg::minus_grad_phi(evreg::RegularizerKind::GeomTypeI, d, p) == analytic);
    }
}

TEST_CASE("evidential loss composition") {
    const evreg::NIGParams p{0.0, 1.0, 1.0, 1.0};
    evreg::ErrorEvidencePair pair{0.0, 3.0, 0.2, 0.8};
    evreg::LossWeights w;

    SECTION("nll plus on-line geom") {
        const double loss = evreg::evidential_loss(0.0, p, pair, w);
        REQUIRE_THAT(loss, WithinAbs(-std::log(0.25), 1e-12));
        REQUIRE_THAT(loss, WithinAbs(1.3863, 5e-5));
    }
    SECTION("geom weight zero reduces to weighted nll") {
        w.lambda_geom = 0.0;
        w.lambda_nll = 2.5;
        pair.delta_norm = 0.9;
        pair.phi_norm = 0.9;
        REQUIRE_THAT(evreg::evidential_loss(0.0, p, pair, w),
                     WithinRel(2.5 * evreg::nll_loss(0.0, p), 1e-15));
    }
    SECTION("nll weight zero with pair on the line is exactly zero") {
        w.lambda_nll = 0.0;
        REQUIRE(evreg::evidential_loss(0.0, p, pair, w) == 0.0);
    }
    SECTION("type 2 variant is selected by the enum") {
        w.lambda_nll = 0.0;
        w.geom_type = evreg::GeomType::TypeII;
        REQUIRE_THAT(evreg::evidential_loss(0.0, p, pair, w),
                     WithinRel(evreg::geom_type2(0.2, 0.8), 1e-15));
    }
    SECTION("negative weights are rejected") {
        w.lambda_der = -1.0;
        REQUIRE_THROWS_AS(evreg::evidential_loss(0.0, p, pair, w), std::domain_error);
    }
}

TEST_CASE("total loss composition") {
    evreg::LossWeights w;
    const std::vector<double> zero_terms{0.0, 0.0};
    REQUIRE(evreg::total_loss(1.0, zero_terms, w) == 1.0);

    const std::vector<double> ones{1.0, 1.0, 1.0, 1.0};
    REQUIRE_THAT(evreg::total_loss(0.0, ones, w), WithinRel(2e-3, 1e-12));

    w.lambda_der = 1.0;
    const std::vector<double> half{0.5};
    REQUIRE_THAT(evreg::total_loss(2.5, half, w), WithinRel(3.5, 1e-15));

    REQUIRE_THROWS_AS(evreg::total_loss(1.0, std::vector<double>{}, w), std::domain_error);
}

TEST_CASE("error evidence pairs are normalized per batch") {
    const std::vector<double> obs{0.0, 1.0, 4.0};
    const std::vector<evreg::NIGParams> params{
        {0.0, 1.0, 2.0, 1.0}, {0.0, 2.0, 3.0, 1.0}, {0.0, 0.5, 4.0, 1.0}};
    const auto pairs = evreg::build_error_evidence_pairs(obs, params);
    REQUIRE(pairs.size() == 3);
    REQUIRE(pairs[0].delta == 0.0);
    REQUIRE(pairs[2].delta == 4.0);
    REQUIRE(pairs[0].phi == 4.0);
    REQUIRE(pairs[1].phi == 7.0);
    REQUIRE(pairs[2].phi == 5.0);
    REQUIRE(pairs[0].delta_norm == 0.0);
    REQUIRE(pairs[2].delta_norm == 1.0);
    REQUIRE(pairs[1].delta_norm == 0.25);
    REQUIRE(pairs[0].phi_norm == 0.0);
    REQUIRE(pairs[1].phi_norm == 1.0);
    REQUIRE_THAT(pairs[2].phi_norm, WithinRel(1.0 / 3.0, 1e-15));

    const std::vector<double> one_obs{2.0};
    const std::vector<evreg::NIGParams> one_param{{0.0, 1.0, 2.0, 1.0}};
    const auto single = evreg::build_error_evidence_pairs(one_obs, one_param);
    REQUIRE(single[0].delta_norm == std::tanh(2.0));
    REQUIRE(single[0].phi_norm == std::tanh(4.0));
}

TEST_CASE("gradient field sampling") {
    const auto field = evreg::gradient_field(evreg::RegularizerKind::Vanilla, 11);
    REQUIRE(field.size() == 121);
    for (const auto& pt : field) {
        if (std::abs(pt.delta_norm - 0.3) < 1e-12) REQUIRE_THAT(pt.minus_grad_phi,
                                                                WithinAbs(-0.3, 1e-12));
    }

    const auto t1 = evreg::gradient_field(evreg::RegularizerKind::GeomTypeI, 3);
    REQUIRE(t1.size() == 9);
    for (const auto& pt : t1) {
        if (pt.delta_norm == 0.5 && pt.phi_norm == 0.5) REQUIRE(pt.minus_grad_phi == 0.0);
    }

    const double fd_t2 = -evreg::finite_difference_1d(
        [](double pn) { return evreg::geom_type2(0.0, pn); }, 1.0 - 1e-4, 1e-5);
    const double analytic = evreg::minus_grad_phi(evreg::RegularizerKind::GeomTypeII, 0.0, 1.0);
    REQUIRE_THAT(analytic, WithinAbs(fd_t2, 1e-8));
    REQUIRE_THAT(analytic, WithinAbs(2.0, 1e-12));

    REQUIRE_THROWS_AS(evreg::gradient_field(evreg::RegularizerKind::Vanilla, 1),
                      std::domain_error);
}

TEST_CASE("gradient field is delta-major over the unit square") {
    const auto field = evreg::gradient_field(evreg::RegularizerKind::GeomTypeII, 4);
    REQUIRE(field.size() == 16);
    REQUIRE(field.front().delta_norm == 0.0);
    REQUIRE(field.front().phi_norm == 0.0);
    REQUIRE(field.back().delta_norm == 1.0);
    REQUIRE(field.back().phi_norm == 1.0);
    REQUIRE_THAT(field[1].phi_norm, WithinRel(1.0 / 3.0, 1e-12));
    REQUIRE(field[1].delta_norm == 0.0);
    REQUIRE_THAT(field[4].delta_norm, WithinRel(1.0 / 3.0, 1e-12));
    REQUIRE(field[4].phi_norm == 0.0);
}
