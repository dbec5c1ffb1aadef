#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffslam/ops.hpp"
#include "diffslam/tensor.hpp"

namespace diffslam {

// Nonlinear least squares: minimize 0.5 * r(x)^T r(x).
//
// `residual` maps the parameter k-vector to the residual m-vector and must be
// built from tape primitives so the unrolled solver stays differentiable.
// `jacobian` returns [m,k]; when absent the reference solvers fall back to
// row-wise reverse differentiation (exact, but off-tape and slower), and the
// unrolled solver refuses to run.
struct LeastSquaresProblem {
    std::function<Tensor(const Tensor&)> residual;
    std::function<Tensor(const Tensor&)> jacobian;
    Tensor x0;
};

// Logistic gate parameters for the smooth trust-region update.
// lambda_next = lambda_min + (lambda_max - lambda_min) / (1 + D e^{-sigma dr})
// with dr = |r(x_trial)|^2 - |r(x)|^2.
struct GatingParams {
    // Defaults are calibrated so the unrolled solver tracks classic LM on the
    // nonlinear fitting suite (see curve_suite tests): a large D keeps the
    // damping near lambda_max/(1+D) ~ 0.1 for neutral lookaheads instead of
    // parking at the heavy midpoint, and sigma of 1 leaves intermediate
    // damping levels reachable for moderately bad trial steps.
    double lambda_min = 1e-4;
    double lambda_max = 10.0;
    double D = 100.0;
    double sigma = 1.0;
    double lambda_init = 1e-2;
    // Steepness s of the iterate gate x' = x + dx / (1 + e^{+s dr}).
    double step_steepness = 100.0;
    // Smooth trust-region radius: the step is scaled by cap/(cap + |dx|),
    // which leaves ordinary steps untouched and stops runaway extrapolation
    // on flat residual tails where the normal equations are tiny but
    // relatively well conditioned.
    double max_step = 5.0;
    // Reproduces the iterate gate exactly as printed (x' = x + dx sigmoid(dr)),
    // which rewards *worsening* trial steps; kept for comparability only.
    bool paper_literal_qx_sign = false;

    void validate() const;
};

// Same gates with the four falloff parameters as (possibly on-tape) tensors,
// so losses can differentiate the damping schedule itself.
struct GatingTensors {
    Tensor lambda_min, lambda_max, D, sigma;
    static GatingTensors constants(const GatingParams& p);
};

struct SolverTrace {
    std::vector<Tensor> iterates;        // x_0 .. x_T (on-tape for the unrolled solver)
    std::vector<double> residual_norms;  // r^T r at each iterate (forward values)
    std::vector<double> lambdas;         // damping used to compute step t (empty for gd/gn)
    std::vector<std::string> warnings;   // e.g. ridge fallback on singular systems
    Tensor final_cost;                   // on-tape r^T r at x_T (unrolled solver only)

    const Tensor& final_x() const { return iterates.back(); }
    double final_cost_value() const { return residual_norms.back(); }
};

struct GdOptions {
    double step_size = 1e-2;
};

struct LmOptions {
    double lambda_init = 1e-2;
    double up = 10.0;    // on rejected steps
    double down = 0.1;   // on accepted steps
};

// Reference solvers. These run on detached values and are not meant to be
// differentiated through.
SolverTrace solve_gd(const LeastSquaresProblem& problem, int max_iters, const GdOptions& opts = {});
SolverTrace solve_gn(const LeastSquaresProblem& problem, int max_iters);
SolverTrace solve_lm(const LeastSquaresProblem& problem, int max_iters, const LmOptions& opts = {});

// Fully unrolled smooth trust-region solve. Differentiable w.r.t. x0, any
// tensors captured by the residual/jacobian closures, and the gating tensors.
SolverTrace solve_gradlm(const LeastSquaresProblem& problem, int max_iters,
                         const GatingParams& params = {});
SolverTrace solve_gradlm(const LeastSquaresProblem& problem, int max_iters,
                         const GatingTensors& gates, const GatingParams& opts);

}  // namespace diffslam
