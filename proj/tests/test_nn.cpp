#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "evreg/autodiff.hpp"
#include "evreg/matrix.hpp"
#include "evreg/nn.hpp"
#include "evreg/rng.hpp"

using evreg::Activation;
using evreg::Matrix;
using evreg::MLPConfig;

TEST_CASE("mlp config validation rejects missing hidden layers and zero widths") {
    REQUIRE_THROWS_AS(evreg::validate(MLPConfig{{3, 4}, Activation::ReLU, 0}),
                      std::domain_error);
    REQUIRE_THROWS_AS(evreg::validate(MLPConfig{{3, 0, 2}, Activation::ReLU, 0}),
                      std::domain_error);
    REQUIRE_NOTHROW(evreg::validate(MLPConfig{{3, 4, 2}, Activation::ReLU, 0}));
}

TEST_CASE("identity weights and zero biases pass positive input through unchanged") {
    MLPConfig config{{2, 2, 2}, Activation::ReLU, 0};
    std::vector<evreg::NamedParam> params = {
        {"layer0.weight", Matrix::identity(2)},
        {"layer0.bias", Matrix(1, 2)},
        {"layer1.weight", Matrix::identity(2)},
        {"layer1.bias", Matrix(1, 2)},
    };
    const Matrix input(3, 2, {0.5, 1.0, 2.0, 0.25, 1.5, 3.0});
    REQUIRE(evreg::mlp_forward(config, params, input) == input);
}

TEST_CASE("zero weights make the output equal the final bias") {
    MLPConfig config{{3, 4, 2}, Activation::Tanh, 0};
    auto params = evreg::init_mlp(config);
    for (auto& p : params)
        if (p.name.ends_with("weight"))
            for (double& v : p.value.data) v = 0.0;
    params[3].value = Matrix(1, 2, {0.7, -0.3});
    const Matrix out = evreg::mlp_forward(config, params, Matrix(2, 3, 1.0));
    for (std::size_t i = 0; i < out.rows; ++i) {
        REQUIRE(out.at(i, 0) == 0.7);
        REQUIRE(out.at(i, 1) == -0.3);
    }
}

TEST_CASE("initialization is seeded, bounded, and layer-shaped") {
    MLPConfig config{{5, 7, 4}, Activation::ReLU, 42};
    const auto a = evreg::init_mlp(config);
    const auto b = evreg::init_mlp(config);
    REQUIRE(a.size() == 4);
    REQUIRE(a[0].name == "layer0.weight");
    REQUIRE(a[0].value.rows == 5);
    REQUIRE(a[0].value.cols == 7);
    REQUIRE(a[1].value == Matrix(1, 7));
    REQUIRE(a[2].value.rows == 7);
    REQUIRE(a[2].value.cols == 4);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].value == b[i].value);
    const double bound0 = std::sqrt(6.0 / (5.0 + 7.0));
    for (double v : a[0].value.data) REQUIRE(std::abs(v) <= bound0);
    MLPConfig other = config;
    other.seed = 43;
    REQUIRE(evreg::init_mlp(other)[0].value != a[0].value);
}

TEST_CASE("plain and tape forwards agree") {
    MLPConfig config{{2, 6, 3}, Activation::Tanh, 7};
    const auto params = evreg::init_mlp(config);
    evreg::Rng rng(11);
    Matrix input(4, 2);
    for (double& v : input.data) v = rng.uniform(-2.0, 2.0);
    const Matrix plain = evreg::mlp_forward(config, params, input);
    evreg::ad::Tape t;
    std::vector<evreg::ad::Var> pvars;
    for (const auto& p : params) pvars.push_back(t.input(p.value));
    const Matrix tape = evreg::mlp_forward(config, pvars, t.constant(input)).value();
    for (std::size_t i = 0; i < plain.data.size(); ++i)
        REQUIRE_THAT(tape.data[i], Catch::Matchers::WithinAbs(plain.data[i], 1e-14));
}

TEST_CASE("mlp rejects mismatched parameters and inputs") {
    MLPConfig config{{2, 4, 1}, Activation::ReLU, 0};
    auto params = evreg::init_mlp(config);
    REQUIRE_THROWS_AS(evreg::mlp_forward(config, params, Matrix(3, 5, 1.0)),
                      std::invalid_argument);
    params.pop_back();
    REQUIRE_THROWS_AS(evreg::mlp_forward(config, params, Matrix(3, 2, 1.0)),
                      std::invalid_argument);
}

TEST_CASE("adaptive optimizer drives a quadratic to its minimum") {
    std::vector<evreg::NamedParam> params = {{"x", Matrix(1, 3, {5.0, -4.0, 2.5})}};
    const Matrix target(1, 3, {1.0, 2.0, -0.5});
    evreg::Adam opt({.lr = 0.05}, params);
    for (int step = 0; step < 800; ++step) {
        Matrix grad(1, 3);
        for (std::size_t i = 0; i < 3; ++i)
            grad.at(0, i) = 2.0 * (params[0].value.at(0, i) - target.at(0, i));
        opt.step(params, {grad});
    }
    REQUIRE(opt.steps_taken() == 800);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE_THAT(params[0].value.at(0, i), Catch::Matchers::WithinAbs(target.at(0, i), 1e-3));
}

TEST_CASE("optimizer rejects misaligned gradients") {
    std::vector<evreg::NamedParam> params = {{"x", Matrix(2, 2, 1.0)}};
    evreg::Adam opt({}, params);
    REQUIRE_THROWS_AS(opt.step(params, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(opt.step(params, {Matrix(1, 2, 1.0)}), std::invalid_argument);
}
