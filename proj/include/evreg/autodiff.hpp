#pragma once

// Minimal reverse-mode tape over dense matrices. Nodes are appended eagerly
// during the forward pass; backward() replays the recorded closures in
// reverse creation order. Scalars are 1x1 matrices. Elementwise binaries
// broadcast between equal shapes, 1x1 scalars, 1xC rows, and Rx1 columns.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evreg/matrix.hpp"
#include "evreg/specials.hpp"

namespace evreg::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t idx = 0;

    const Matrix& value() const;
    const Matrix& grad() const;
    double scalar() const;
};

class Tape {
  public:
    Var input(Matrix value) { return push(std::move(value), true, {}); }
    Var constant(Matrix value) { return push(std::move(value), false, {}); }
    Var constant(double value) { return constant(Matrix(1, 1, std::vector<double>{value})); }

    const Matrix& value(std::size_t idx) const { return nodes_[idx].value; }
    const Matrix& grad(std::size_t idx) const { return nodes_[idx].grad; }
    bool requires_grad(std::size_t idx) const { return nodes_[idx].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Index the next pushed node will receive; closures capture it so they
    /// can read their own output gradient during the reverse sweep.
    std::size_t next_index() const { return nodes_.size(); }

    Var push(Matrix value, bool requires_grad, std::function<void(Tape&)> backprop) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backprop)});
        return Var{this, nodes_.size() - 1};
    }

    /// Accumulates a full-shape gradient into a node, summing over any
    /// dimension the node's value was broadcast along.
    void accumulate(std::size_t idx, const Matrix& g) {
        if (!nodes_[idx].requires_grad) return;
        Matrix& dst = nodes_[idx].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j)
                dst.at(dst.rows == 1 ? 0 : i, dst.cols == 1 ? 0 : j) += g.at(i, j);
    }

    /// Reverse sweep from a scalar loss node. Rebuild the tape per step
    /// rather than calling this twice on one graph.
    void backward(Var loss) {
        const Matrix& l = value(loss.idx);
        if (l.rows != 1 || l.cols != 1)
            throw std::invalid_argument("backward: loss must be a 1x1 scalar");
        for (auto& n : nodes_) n.grad = Matrix(n.value.rows, n.value.cols);
        nodes_[loss.idx].grad.at(0, 0) = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].requires_grad && nodes_[i].backprop) nodes_[i].backprop(*this);
        }
    }

  private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;
    };

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(idx); }
inline const Matrix& Var::grad() const { return tape->grad(idx); }
inline double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows != 1 || v.cols != 1) throw std::invalid_argument("scalar(): node is not 1x1");
    return v.at(0, 0);
}

namespace detail {

inline void check_same_tape(const Var& a, const Var& b) {
    if (a.tape != b.tape) throw std::invalid_argument("autodiff: operands from different tapes");
}

inline bool broadcastable(std::size_t a, std::size_t b) { return a == b || a == 1 || b == 1; }

/// Elementwise binary with broadcasting. `da`/`db` give the local partials
/// as functions of the two broadcast operand values.
template <typename Fwd, typename BwdA, typename BwdB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, BwdA da, BwdB db) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (!broadcastable(av.rows, bv.rows) || !broadcastable(av.cols, bv.cols))
        throw std::invalid_argument(std::string(name) + ": shapes (" + std::to_string(av.rows) +
                                    "x" + std::to_string(av.cols) + ") and (" +
                                    std::to_string(bv.rows) + "x" + std::to_string(bv.cols) +
                                    ") do not broadcast");
    const std::size_t rows = std::max(av.rows, bv.rows), cols = std::max(av.cols, bv.cols);
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out.at(i, j) = fwd(av.at(av.rows == 1 ? 0 : i, av.cols == 1 ? 0 : j),
                               bv.at(bv.rows == 1 ? 0 : i, bv.cols == 1 ? 0 : j));
    const bool needs = t.requires_grad(a.idx) || t.requires_grad(b.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, bi = b.idx, oi = t.next_index();
        backprop = [ai, bi, oi, da, db](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            const Matrix& av2 = tape.value(ai);
            const Matrix& bv2 = tape.value(bi);
            Matrix ga(g.rows, g.cols), gb(g.rows, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i) {
                for (std::size_t j = 0; j < g.cols; ++j) {
                    const double x = av2.at(av2.rows == 1 ? 0 : i, av2.cols == 1 ? 0 : j);
                    const double y = bv2.at(bv2.rows == 1 ? 0 : i, bv2.cols == 1 ? 0 : j);
                    ga.at(i, j) = g.at(i, j) * da(x, y);
                    gb.at(i, j) = g.at(i, j) * db(x, y);
                }
            }
            tape.accumulate(ai, ga);
            tape.accumulate(bi, gb);
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

/// Elementwise unary; `dfdx` receives (input value, output value).
template <typename Fwd, typename Bwd>
Var unary(const Var& a, Fwd fwd, Bwd dfdx) {
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    Matrix out(av.rows, av.cols);
    for (std::size_t i = 0; i < av.data.size(); ++i) out.data[i] = fwd(av.data[i]);
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi, dfdx](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            const Matrix& x = tape.value(ai);
            const Matrix& y = tape.value(oi);
            Matrix ga(g.rows, g.cols);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                ga.data[i] = g.data[i] * dfdx(x.data[i], y.data[i]);
            tape.accumulate(ai, ga);
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

/// x * scale + shift with plain-double coefficients.
inline Var affine(const Var& a, double scale, double shift) {
    return detail::unary(
        a, [scale, shift](double x) { return x * scale + shift; },
        [scale](double, double) { return scale; });
}

inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

inline Var log(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var sqrt(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

inline Var tanh(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var softplus(const Var& a) {
    return detail::unary(
        a, [](double x) { return evreg::softplus(x); },
        [](double x, double) { return evreg::sigmoid(x); });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a, [](double x) { return evreg::sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var lgamma(const Var& a) {
    return detail::unary(
        a, [](double x) { return evreg::log_gamma(x); },
        [](double x, double) { return evreg::digamma(x); });
}

inline Var abs(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// x^p for a plain-double exponent; bases must stay in the differentiable
/// domain of std::pow (positive in every use here).
inline Var pow_const(const Var& a, double p) {
    return detail::unary(
        a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

/// Elementwise smooth L1: 0.5 x^2 inside |x|<1, |x|-0.5 outside.
inline Var smooth_l1(const Var& a) {
    return detail::unary(
        a,
        [](double x) {
            const double m = std::abs(x);
            return m < 1.0 ? 0.5 * x * x : m - 0.5;
        },
        [](double x, double) { return std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0); });
}

/// Forward clamp with a pass-through gradient strictly inside (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var matmul(const Var& a, const Var& b) {
    detail::check_same_tape(a, b);
    Tape& t = *a.tape;
    Matrix out = evreg::matmul(a.value(), b.value());
    const bool needs = t.requires_grad(a.idx) || t.requires_grad(b.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, bi = b.idx, oi = t.next_index();
        backprop = [ai, bi, oi](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            tape.accumulate(ai, evreg::matmul(g, transpose(tape.value(bi))));
            tape.accumulate(bi, evreg::matmul(transpose(tape.value(ai)), g));
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

inline Var transpose(const Var& a) {
    Tape& t = *a.tape;
    Matrix out = evreg::transpose(a.value());
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi](Tape& tape) {
            tape.accumulate(ai, evreg::transpose(tape.grad(oi)));
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

/// Row-wise softmax with max-shift stabilization.
inline Var softmax_rows(const Var& a) {
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    Matrix out(av.rows, av.cols);
    for (std::size_t i = 0; i < av.rows; ++i) {
        double m = av.at(i, 0);
        for (std::size_t j = 0; j < av.cols; ++j) m = std::max(m, av.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < av.cols; ++j) {
            out.at(i, j) = std::exp(av.at(i, j) - m);
            denom += out.at(i, j);
        }
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i, j) /= denom;
    }
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            const Matrix& y = tape.value(oi);
            Matrix ga(g.rows, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < g.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < g.cols; ++j)
                    ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
            }
            tape.accumulate(ai, ga);
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

inline Var sum(const Var& a) {
    Tape& t = *a.tape;
    double total = 0.0;
    for (double x : a.value().data) total += x;
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi](Tape& tape) {
            const double g = tape.grad(oi).at(0, 0);
            const Matrix& x = tape.value(ai);
            tape.accumulate(ai, Matrix(x.rows, x.cols, g));
        };
    }
    return t.push(Matrix(1, 1, std::vector<double>{total}), needs, std::move(backprop));
}

inline Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().data.size());
    return affine(sum(a), 1.0 / n, 0.0);
}

/// Row sums: RxC -> Rx1.
inline Var sum_rows(const Var& a) {
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    Matrix out(av.rows, 1);
    for (std::size_t i = 0; i < av.rows; ++i)
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i, 0) += av.at(i, j);
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            const Matrix& x = tape.value(ai);
            Matrix ga(x.rows, x.cols);
            for (std::size_t i = 0; i < x.rows; ++i)
                for (std::size_t j = 0; j < x.cols; ++j) ga.at(i, j) = g.at(i, 0);
            tape.accumulate(ai, ga);
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

/// Column slice: RxC -> Rx1; the gradient scatters back into that column.
inline Var col(const Var& a, std::size_t j) {
    Tape& t = *a.tape;
    const Matrix& av = a.value();
    if (j >= av.cols) throw std::out_of_range("col: column index out of range");
    Matrix out(av.rows, 1);
    for (std::size_t i = 0; i < av.rows; ++i) out.at(i, 0) = av.at(i, j);
    const bool needs = t.requires_grad(a.idx);
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t ai = a.idx, oi = t.next_index();
        backprop = [ai, oi, j](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            const Matrix& x = tape.value(ai);
            Matrix ga(x.rows, x.cols);
            for (std::size_t i = 0; i < x.rows; ++i) ga.at(i, j) = g.at(i, 0);
            tape.accumulate(ai, ga);
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

/// Severs gradient flow: the result carries the same values as a constant.
inline Var detach(const Var& a) { return a.tape->constant(a.value()); }

/// Constant Rx1 of row maxima, for externally stabilized log-sum-exp.
inline Var row_max_constant(const Var& a) {
    const Matrix& av = a.value();
    Matrix out(av.rows, 1);
    for (std::size_t i = 0; i < av.rows; ++i) {
        double m = av.at(i, 0);
        for (std::size_t j = 0; j < av.cols; ++j) m = std::max(m, av.at(i, j));
        out.at(i, 0) = m;
    }
    return a.tape->constant(std::move(out));
}

/// Row-wise log(sum(exp(x))): RxC -> Rx1, stabilized against a detached row
/// max (the gradient is still the exact softmax).
inline Var log_sum_exp_rows(const Var& a) {
    const Var m = row_max_constant(a);
    return add(log(sum_rows(exp(sub(a, m)))), m);
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double c) { return affine(a, 1.0, c); }
inline Var operator+(double c, const Var& a) { return affine(a, 1.0, c); }
inline Var operator-(const Var& a, double c) { return affine(a, 1.0, -c); }
inline Var operator-(double c, const Var& a) { return affine(a, -1.0, c); }
inline Var operator*(const Var& a, double c) { return affine(a, c, 0.0); }
inline Var operator*(double c, const Var& a) { return affine(a, c, 0.0); }
inline Var operator/(const Var& a, double c) { return affine(a, 1.0 / c, 0.0); }
inline Var operator/(double c, const Var& a) { return div(a.tape->constant(c), a); }

/// max(x, c) and min(x, c) via relu composition.
inline Var max_const(const Var& a, double c) { return relu(a - c) + c; }
inline Var min_const(const Var& a, double c) { return c - relu(affine(a, -1.0, c)); }

/// Elementwise max/min of two nodes; ties route the gradient to the first.
inline Var vmax(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "vmax", [](double x, double y) { return x > y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Var vmin(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "vmin", [](double x, double y) { return x < y ? x : y; },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

/// Stacks equal-width nodes vertically; gradients scatter back row-block by
/// row-block. Used to batch per-sample scalars into one reducible column.
inline Var vstack(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("vstack: no parts");
    Tape& t = *parts.front().tape;
    const std::size_t cols = parts.front().value().cols;
    std::size_t total_rows = 0;
    bool needs = false;
    for (const Var& p : parts) {
        detail::check_same_tape(parts.front(), p);
        if (p.value().cols != cols) throw std::invalid_argument("vstack: column widths differ");
        total_rows += p.value().rows;
        needs = needs || t.requires_grad(p.idx);
    }
    Matrix out(total_rows, cols);
    std::size_t row = 0;
    std::vector<std::size_t> indices, offsets;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        indices.push_back(p.idx);
        offsets.push_back(row);
        for (std::size_t i = 0; i < v.rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out.at(row + i, j) = v.at(i, j);
        row += v.rows;
    }
    std::function<void(Tape&)> backprop;
    if (needs) {
        const std::size_t oi = t.next_index();
        backprop = [indices, offsets, oi](Tape& tape) {
            const Matrix& g = tape.grad(oi);
            for (std::size_t p = 0; p < indices.size(); ++p) {
                const Matrix& v = tape.value(indices[p]);
                Matrix block(v.rows, v.cols);
                for (std::size_t i = 0; i < v.rows; ++i)
                    for (std::size_t j = 0; j < v.cols; ++j)
                        block.at(i, j) = g.at(offsets[p] + i, j);
                tape.accumulate(indices[p], block);
            }
        };
    }
    return t.push(std::move(out), needs, std::move(backprop));
}

inline Var vstack(std::initializer_list<Var> parts) {
    return vstack(std::span<const Var>(parts.begin(), parts.size()));
}

}  // namespace evreg::ad
