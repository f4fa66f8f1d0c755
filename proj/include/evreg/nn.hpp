#pragma once

// Small trainable building blocks for the desk-scale experiments: a dense
// MLP, the evidential output head, and an adaptive-moment optimizer. Every
// forward exists twice: plain matrices for evaluation and tape variables for
// training.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "evreg/autodiff.hpp"
#include "evreg/matrix.hpp"
#include "evreg/nig.hpp"
#include "evreg/rng.hpp"
#include "evreg/specials.hpp"

namespace evreg {

enum class Activation { ReLU, Tanh };

struct MLPConfig {
    std::vector<std::size_t> layer_widths;  // input, hidden..., output
    Activation activation = Activation::ReLU;
    std::uint64_t seed = 0;
};

inline void validate(const MLPConfig& c) {
    if (c.layer_widths.size() < 3)
        throw std::domain_error("mlp: need input, at least one hidden, and output widths");
    for (std::size_t w : c.layer_widths)
        if (w == 0) throw std::domain_error("mlp: layer widths must be positive");
}

struct NamedParam {
    std::string name;
    Matrix value;
};

/// Uniform in +/- sqrt(6 / (fan_in + fan_out)).
inline Matrix xavier_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.uniform(-bound, bound);
    return m;
}

/// layer{i}.weight is (fan_in x fan_out), layer{i}.bias is (1 x fan_out,
/// zeros); parameter order is fixed so optimizer state and checkpoints align.
inline std::vector<NamedParam> init_mlp(const MLPConfig& config) {
    validate(config);
    Rng rng(config.seed);
    std::vector<NamedParam> params;
    for (std::size_t i = 0; i + 1 < config.layer_widths.size(); ++i) {
        const std::size_t fan_in = config.layer_widths[i];
        const std::size_t fan_out = config.layer_widths[i + 1];
        const std::string prefix = "layer" + std::to_string(i);
        params.push_back({prefix + ".weight", xavier_matrix(rng, fan_in, fan_out)});
        params.push_back({prefix + ".bias", Matrix(1, fan_out)});
    }
    return params;
}

namespace detail {
inline void check_mlp_shapes(const MLPConfig& config, std::size_t param_count,
                             std::size_t input_cols) {
    validate(config);
    if (param_count != 2 * (config.layer_widths.size() - 1))
        throw std::invalid_argument("mlp: parameter count does not match config");
    if (input_cols != config.layer_widths.front())
        throw std::invalid_argument("mlp: input has " + std::to_string(input_cols) +
                                    " columns, config expects " +
                                    std::to_string(config.layer_widths.front()));
}
}  // namespace detail

/// Affine + activation stack; the final layer is affine only.
inline Matrix mlp_forward(const MLPConfig& config, const std::vector<NamedParam>& params,
                          const Matrix& input) {
    detail::check_mlp_shapes(config, params.size(), input.cols);
    Matrix x = input;
    for (std::size_t layer = 0; layer + 1 < config.layer_widths.size(); ++layer) {
        const Matrix& w = params[2 * layer].value;
        const Matrix& b = params[2 * layer + 1].value;
        Matrix next = matmul(x, w);
        for (std::size_t i = 0; i < next.rows; ++i)
            for (std::size_t j = 0; j < next.cols; ++j) next.at(i, j) += b.at(0, j);
        const bool last = layer + 2 == config.layer_widths.size();
        if (!last) {
            for (double& v : next.data)
                v = config.activation == Activation::ReLU ? (v > 0.0 ? v : 0.0) : std::tanh(v);
        }
        x = std::move(next);
    }
    return x;
}

/// Tape twin of mlp_forward; `params` are the tape inputs for the same
/// parameter order as init_mlp.
inline ad::Var mlp_forward(const MLPConfig& config, const std::vector<ad::Var>& params,
                           ad::Var input) {
    detail::check_mlp_shapes(config, params.size(), input.value().cols);
    ad::Var x = input;
    for (std::size_t layer = 0; layer + 1 < config.layer_widths.size(); ++layer) {
        x = ad::add(ad::matmul(x, params[2 * layer]), params[2 * layer + 1]);
        const bool last = layer + 2 == config.layer_widths.size();
        if (!last) x = config.activation == Activation::ReLU ? ad::relu(x) : ad::tanh(x);
    }
    return x;
}

inline constexpr double kEvidentialEps = 1e-6;

/// Maps one raw 4-vector onto the valid NIG domain: location passes through,
/// upsilon/beta get softplus floors, alpha additionally clears 1.
inline NIGParams nig_params_from_raw(double r0, double r1, double r2, double r3) {
    return {r0, softplus(r1) + kEvidentialEps, softplus(r2) + 1.0 + kEvidentialEps,
            softplus(r3) + kEvidentialEps};
}

/// Batch version over (n x 4) raw head outputs.
inline std::vector<NIGParams> nig_params_from_raw(const Matrix& raw) {
    if (raw.cols != 4)
        throw std::invalid_argument("evidential head: raw output must have 4 columns");
    std::vector<NIGParams> out(raw.rows);
    for (std::size_t i = 0; i < raw.rows; ++i)
        out[i] = nig_params_from_raw(raw.at(i, 0), raw.at(i, 1), raw.at(i, 2), raw.at(i, 3));
    return out;
}

/// Tape twin: column views of the mapped parameters, each (n x 1).
struct EvidentialVars {
    ad::Var gamma;
    ad::Var upsilon;
    ad::Var alpha;
    ad::Var beta;
};

inline EvidentialVars evidential_head(const ad::Var& raw) {
    if (raw.value().cols != 4)
        throw std::invalid_argument("evidential head: raw output must have 4 columns");
    return {ad::col(raw, 0), ad::softplus(ad::col(raw, 1)) + kEvidentialEps,
            ad::softplus(ad::col(raw, 2)) + 1.0 + kEvidentialEps,
            ad::softplus(ad::col(raw, 3)) + kEvidentialEps};
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive per-parameter steps with bias-corrected first/second moments.
class Adam {
  public:
    Adam(AdamConfig config, const std::vector<NamedParam>& params) : config_(config) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& p : params) {
            m_.emplace_back(p.value.rows, p.value.cols);
            v_.emplace_back(p.value.rows, p.value.cols);
        }
    }

    void step(std::vector<NamedParam>& params, const std::vector<Matrix>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw std::invalid_argument("adam: parameter/gradient count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Matrix& value = params[p].value;
            const Matrix& g = grads[p];
            if (g.rows != value.rows || g.cols != value.cols)
                throw std::invalid_argument("adam: gradient shape mismatch for " +
                                            params[p].name);
            for (std::size_t i = 0; i < value.data.size(); ++i) {
                m_[p].data[i] = config_.beta1 * m_[p].data[i] + (1.0 - config_.beta1) * g.data[i];
                v_[p].data[i] =
                    config_.beta2 * v_[p].data[i] + (1.0 - config_.beta2) * g.data[i] * g.data[i];
                const double mhat = m_[p].data[i] / bc1;
                const double vhat = v_[p].data[i] / bc2;
                value.data[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

  private:
    AdamConfig config_;
    std::size_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

}  // namespace evreg
