#pragma once

// Central finite-difference gradient oracle. Lives in test code only and is
// independent of the tape's backward rules: it re-evaluates the forward
// function at perturbed inputs, never reads recorded gradients.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "diffslam/ops.hpp"
#include "diffslam/tensor.hpp"

namespace gradcheck {

using diffslam::Index;
using diffslam::Shape;
using diffslam::Tape;
using diffslam::Tensor;

// Scalar-valued function of one flat input vector.
using ScalarFn = std::function<double(const std::vector<double>&)>;

inline std::vector<double> finite_diff(const ScalarFn& f, std::vector<double> x, double eps = 1e-6) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + eps;
        const double fp = f(x);
        x[i] = x0 - eps;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

struct GradCompare {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    size_t worst_index = 0;
};

inline GradCompare compare(const std::vector<double>& analytic, const std::vector<double>& numeric,
                           double denom_floor = 1e-6) {
    GradCompare r;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double abs_err = std::abs(analytic[i] - numeric[i]);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), denom_floor});
        const double rel = abs_err / denom;
        if (rel > r.max_rel_err) {
            r.max_rel_err = rel;
            r.worst_index = i;
        }
        r.max_abs_err = std::max(r.max_abs_err, abs_err);
    }
    return r;
}

// Builds a scalar loss from a tape leaf, backprops it, and compares the leaf
// gradient against central differences of the same construction.
//
// `build` maps the (on-tape) leaf to a scalar loss tensor.
inline GradCompare check_leaf_gradient(const Shape& shape, const std::vector<double>& x0,
                                       const std::function<Tensor(const Tensor&)>& build,
                                       double eps = 1e-6) {
    Tape tape;
    Tensor leaf = tape.leaf(shape, x0);
    Tensor loss = build(leaf);
    tape.backward(loss);
    Tensor g = leaf.grad();
    std::vector<double> analytic = g.defined() ? g.to_vector() : std::vector<double>(x0.size(), 0.0);

    ScalarFn f = [&](const std::vector<double>& x) {
        Tape t2;
        Tensor l2 = t2.leaf(shape, x);
        return build(l2).value();
    };
    std::vector<double> numeric = finite_diff(f, x0, eps);
    return compare(analytic, numeric);
}

inline std::vector<double> random_vector(size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

}  // namespace gradcheck
