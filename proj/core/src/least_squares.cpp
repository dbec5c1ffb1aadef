#include "diffslam/least_squares.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace diffslam {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double cost_of(const std::function<Tensor(const Tensor&)>& residual, const Tensor& x) {
    Tensor r = residual(x);
    double acc = 0.0;
    for (double v : r.data()) acc += v * v;
    return acc;
}

// Exact Jacobian via one reverse sweep per residual row; used only when the
// problem does not provide an analytic one.
EMat jacobian_by_rows(const LeastSquaresProblem& problem, const std::vector<double>& x) {
    const Index k = static_cast<Index>(x.size());
    Tape tape;
    Tensor leaf = tape.leaf({k}, x);
    Tensor r = problem.residual(leaf);
    const Index m = r.numel();
    EMat J(m, k);
    for (Index i = 0; i < m; ++i) {
        tape.zero_grad();
        tape.backward(select(r.reshape({m}), 0, i));
        Tensor g = leaf.grad();
        for (Index j = 0; j < k; ++j) J(i, j) = g.defined() ? g.at(j) : 0.0;
    }
    return J;
}

EMat eval_jacobian(const LeastSquaresProblem& problem, const Tensor& x) {
    if (problem.jacobian) {
        Tensor J = problem.jacobian(x.detach());
        return Eigen::Map<const EMat>(J.data().data(), J.dim(0), J.dim(1));
    }
    return jacobian_by_rows(problem, x.to_vector());
}

Eigen::VectorXd eval_residual(const LeastSquaresProblem& problem, const Tensor& x) {
    Tensor r = problem.residual(x.detach());
    return Eigen::Map<const Eigen::VectorXd>(r.data().data(), r.numel());
}

// Solves (J^T J + lambda diag(J^T J)) dx = -J^T r with a ridge fallback.
Eigen::VectorXd damped_step(const EMat& J, const Eigen::VectorXd& r, double lambda,
                            std::vector<std::string>* warnings) {
    EMat A = J.transpose() * J;
    A.diagonal() += lambda * A.diagonal();
    if (warnings) {
        Eigen::LDLT<EMat> probe(A);
        const auto d = probe.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        if (probe.info() != Eigen::Success || !probe.isPositive() || dmax <= 0.0 ||
            d.cwiseAbs().minCoeff() < 1e-12 * dmax)
            warnings->push_back("normal equations singular; added 1e-10 ridge");
    }
    // unconditional absolute ridge, same policy as the on-tape linear_solve
    A.diagonal().array() += 1e-10;
    Eigen::VectorXd b = -J.transpose() * r;
    return Eigen::LDLT<EMat>(A).solve(b);
}

Tensor from_vec(const Eigen::VectorXd& v) {
    return Tensor::constant({static_cast<Index>(v.size())},
                            std::vector<double>(v.data(), v.data() + v.size()));
}

}  // namespace

void GatingParams::validate() const {
    if (!(lambda_min > 0) || !(lambda_max > lambda_min))
        throw ContractError("gating: requires 0 < lambda_min < lambda_max");
    if (!(D > 0)) throw ContractError("gating: D must be positive");
    if (!(sigma > 0)) throw ContractError("gating: sigma must be positive");
    if (!(lambda_init > 0)) throw ContractError("gating: lambda_init must be positive");
    if (!(step_steepness > 0)) throw ContractError("gating: step_steepness must be positive");
    if (!(max_step > 0)) throw ContractError("gating: max_step must be positive");
}

GatingTensors GatingTensors::constants(const GatingParams& p) {
    p.validate();
    GatingTensors g;
    g.lambda_min = Tensor::scalar(p.lambda_min);
    g.lambda_max = Tensor::scalar(p.lambda_max);
    g.D = Tensor::scalar(p.D);
    g.sigma = Tensor::scalar(p.sigma);
    return g;
}

SolverTrace solve_gd(const LeastSquaresProblem& problem, int max_iters, const GdOptions& opts) {
    if (max_iters < 1) throw ContractError("solve_gd: max_iters must be >= 1");
    SolverTrace trace;
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(problem.x0.data().data(), problem.x0.numel());
    trace.iterates.push_back(from_vec(x));
    trace.residual_norms.push_back(cost_of(problem.residual, trace.iterates.back()));
    for (int it = 0; it < max_iters; ++it) {
        EMat J = eval_jacobian(problem, trace.iterates.back());
        Eigen::VectorXd r = eval_residual(problem, trace.iterates.back());
        // gradient of 0.5 |r|^2
        x -= opts.step_size * (J.transpose() * r);
        trace.iterates.push_back(from_vec(x));
        trace.residual_norms.push_back(cost_of(problem.residual, trace.iterates.back()));
    }
    return trace;
}

SolverTrace solve_gn(const LeastSquaresProblem& problem, int max_iters) {
    if (max_iters < 1) throw ContractError("solve_gn: max_iters must be >= 1");
    SolverTrace trace;
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(problem.x0.data().data(), problem.x0.numel());
    trace.iterates.push_back(from_vec(x));
    trace.residual_norms.push_back(cost_of(problem.residual, trace.iterates.back()));
    for (int it = 0; it < max_iters; ++it) {
        EMat J = eval_jacobian(problem, trace.iterates.back());
        Eigen::VectorXd r = eval_residual(problem, trace.iterates.back());
        x += damped_step(J, r, 0.0, &trace.warnings);
        trace.iterates.push_back(from_vec(x));
        trace.residual_norms.push_back(cost_of(problem.residual, trace.iterates.back()));
    }
    return trace;
}

SolverTrace solve_lm(const LeastSquaresProblem& problem, int max_iters, const LmOptions& opts) {
    if (max_iters < 1) throw ContractError("solve_lm: max_iters must be >= 1");
    SolverTrace trace;
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(problem.x0.data().data(), problem.x0.numel());
    double lambda = opts.lambda_init;
    trace.iterates.push_back(from_vec(x));
    double cost = cost_of(problem.residual, trace.iterates.back());
    trace.residual_norms.push_back(cost);
    for (int it = 0; it < max_iters; ++it) {
        EMat J = eval_jacobian(problem, trace.iterates.back());
        Eigen::VectorXd r = eval_residual(problem, trace.iterates.back());
        Eigen::VectorXd dx = damped_step(J, r, lambda, &trace.warnings);
        Eigen::VectorXd x_try = x + dx;
        const double cost_try = cost_of(problem.residual, from_vec(x_try));
        trace.lambdas.push_back(lambda);
        if (cost_try < cost) {
            x = x_try;
            cost = cost_try;
            lambda = std::max(lambda * opts.down, 1e-12);
        } else {
            // rejected trial: revert (keep x) and damp harder
            lambda = std::min(lambda * opts.up, 1e12);
        }
        trace.iterates.push_back(from_vec(x));
        trace.residual_norms.push_back(cost);
    }
    return trace;
}

SolverTrace solve_gradlm(const LeastSquaresProblem& problem, int max_iters,
                         const GatingParams& params) {
    return solve_gradlm(problem, max_iters, GatingTensors::constants(params), params);
}

SolverTrace solve_gradlm(const LeastSquaresProblem& problem, int max_iters,
                         const GatingTensors& gates, const GatingParams& opts) {
    if (max_iters < 1) throw ContractError("solve_gradlm: max_iters must be >= 1");
    if (!problem.jacobian)
        throw ContractError("solve_gradlm: requires an on-tape analytic jacobian");
    opts.validate();

    SolverTrace trace;
    Tensor x = problem.x0;
    const Index k = x.numel();
    std::vector<Index> diag_idx(static_cast<size_t>(k));
    for (Index i = 0; i < k; ++i) diag_idx[static_cast<size_t>(i)] = i * k + i;

    Tensor lambda = Tensor::scalar(opts.lambda_init);
    Tensor r = problem.residual(x);
    Tensor r_norm = dot(r, r);
    trace.iterates.push_back(x);
    trace.residual_norms.push_back(r_norm.value());

    for (int it = 0; it < max_iters; ++it) {
        trace.lambdas.push_back(lambda.value());
        Tensor J = problem.jacobian(x);
        const Index m = J.dim(0);
        Tensor Jt = transpose(J);
        Tensor JtJ = matmul(Jt, J);
        Tensor diag = gather_rows(JtJ.reshape({k * k}), diag_idx);
        Tensor damp = scatter_add_rows(lambda * diag, diag_idx, k * k).reshape({k, k});
        Tensor b = neg(matmul(Jt, r.reshape({m, 1})).reshape({k}));
        bool warned = false;
        Tensor dx = linear_solve(JtJ + damp, b, &warned);
        if (warned) trace.warnings.push_back("normal equations singular; added 1e-10 ridge");
        Tensor step_norm = sqrt(dot(dx, dx) + 1e-30);
        dx = dx * (opts.max_step / (step_norm + opts.max_step));

        Tensor x_try = x + dx;
        Tensor r_try = problem.residual(x_try);
        Tensor r_try_norm = dot(r_try, r_try);
        Tensor dr = r_try_norm - r_norm;

        // damping gate (Eq-style logistic between the two limits)
        lambda = gates.lambda_min +
                 (gates.lambda_max - gates.lambda_min) / (1.0 + gates.D * exp(neg(gates.sigma * dr)));

        // iterate gate: improvement drives the blend toward full acceptance
        Tensor gate = opts.paper_literal_qx_sign ? sigmoid(dr)
                                                 : sigmoid(neg(dr * opts.step_steepness));
        x = x + dx * gate;

        r = problem.residual(x);
        r_norm = dot(r, r);
        trace.iterates.push_back(x);
        trace.residual_norms.push_back(r_norm.value());
    }
    trace.final_cost = r_norm;
    return trace;
}

}  // namespace diffslam
