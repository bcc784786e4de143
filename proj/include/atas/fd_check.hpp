#pragma once

// Central-difference gradients, the oracle that keeps the tape honest.
// The probe function receives detached copies only, so nothing here records
// onto any gradient graph.

#include <cmath>
#include <functional>
#include <vector>

#include "atas/error.hpp"
#include "atas/tensor.hpp"

namespace atas {

// (f(x + h e_i) - f(x - h e_i)) / (2h), one coordinate at a time.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) throw ParameterError("fd_gradient: step must be > 0, got " + std::to_string(h));
    std::vector<double> base = x.data();
    std::vector<double> g(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base;
        std::vector<double> minus = base;
        plus[i] += h;
        minus[i] -= h;
        double fp = f(Tensor::from(x.shape(), std::move(plus), false));
        double fm = f(Tensor::from(x.shape(), std::move(minus), false));
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from(x.shape(), std::move(g), false);
}

// Mixed relative/absolute gradient comparison: a coordinate passes if the
// relative error is under rel_tol, or if both values are so small that the
// absolute gap is under abs_floor (fd noise dominates below that).
inline double grad_error(double analytic, double numeric, double abs_floor = 1e-8) {
    double diff = std::fabs(analytic - numeric);
    if (diff <= abs_floor) return 0.0;
    double denom = std::max(std::fabs(analytic), std::fabs(numeric));
    return diff / denom;
}

inline double max_grad_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double abs_floor = 1e-8) {
    if (analytic.size() != numeric.size()) {
        throw DimensionError("max_grad_error: length mismatch: " + std::to_string(analytic.size()) +
                             " vs " + std::to_string(numeric.size()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, grad_error(analytic[i], numeric[i], abs_floor));
    }
    return worst;
}

} // namespace atas
