#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace evreg {

/// Central differences (f(x+h_i) - f(x-h_i)) / (2 h_i) per coordinate, with
/// the step scaled as h * max(1, |x_i|) so large coordinates keep relative
/// step size.
inline std::vector<double> finite_difference(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-5) {
    if (!(h > 0.0)) throw std::domain_error("finite_difference: h must be > 0");
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double step = h * std::max(1.0, std::abs(x[i]));
        const double saved = x[i];
        x[i] = saved + step;
        const double fp = f(x);
        x[i] = saved - step;
        const double fm = f(x);
        x[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("finite_difference: non-finite evaluation at coordinate " +
                                    std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

inline double finite_difference_1d(const std::function<double(double)>& f, double x,
                                   double h = 1e-5) {
    auto wrapped = [&](const std::vector<double>& v) { return f(v[0]); };
    return finite_difference(wrapped, {x}, h)[0];
}

}  // namespace evreg
