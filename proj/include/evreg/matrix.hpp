#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace evreg {

/// Dense row-major matrix of doubles; the plain (non-tape) numeric carrier.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) throw std::invalid_argument("matrix: data/shape mismatch");
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    bool operator==(const Matrix& other) const = default;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions disagree (" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) +
                                    ")");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

}  // namespace evreg
