#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <unsupported/Eigen/NonLinearOptimization>

#include "diffslam/curve_suite.hpp"
#include "diffslam/least_squares.hpp"
#include "support/gradcheck.hpp"

using namespace diffslam;
using gradcheck::check_leaf_gradient;

namespace {

// r(x) = A x - b with a full-rank A
LeastSquaresProblem linear_problem() {
    Tensor A = Tensor::constant({3, 2}, {2, 0, 0, 3, 1, 1});
    Tensor b = Tensor::constant({3}, {2, 3, 2.5});
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {5, -4});
    p.residual = [A, b](const Tensor& x) {
        return matmul(A, x.reshape({2, 1})).reshape({3}) - b;
    };
    p.jacobian = [A](const Tensor&) { return A; };
    return p;
}

// Rosenbrock in least-squares form: r = (10(x2 - x1^2), 1 - x1)
LeastSquaresProblem rosenbrock_problem() {
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {-1.2, 1.0});
    p.residual = [](const Tensor& x) {
        Tensor x1 = select(x, 0, 0), x2 = select(x, 0, 1);
        return stack({10.0 * (x2 - x1 * x1), 1.0 - x1}, 0);
    };
    p.jacobian = [](const Tensor& x) {
        Tensor x1 = select(x, 0, 0);
        Tensor z = Tensor::scalar(0.0);
        Tensor row0 = stack({-20.0 * x1, Tensor::scalar(10.0)}, 0).reshape({1, 2});
        Tensor row1 = stack({Tensor::scalar(-1.0), z}, 0).reshape({1, 2});
        return concat({row0, row1}, 0);
    };
    return p;
}

struct RosenbrockFunctor {
    using Scalar = double;
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
    int inputs() const { return 2; }
    int values() const { return 2; }
    int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const {
        fvec(0) = 10.0 * (x(1) - x(0) * x(0));
        fvec(1) = 1.0 - x(0);
        return 0;
    }
    int df(const Eigen::VectorXd& x, Eigen::MatrixXd& fjac) const {
        fjac(0, 0) = -20.0 * x(0);
        fjac(0, 1) = 10.0;
        fjac(1, 0) = -1.0;
        fjac(1, 1) = 0.0;
        return 0;
    }
};

}  // namespace

TEST_CASE("gauss-newton solves a linear problem in one iteration") {
    auto p = linear_problem();
    SolverTrace t = solve_gn(p, 2);
    // oracle: the normal-equation solution computed independently
    Eigen::MatrixXd A(3, 2);
    A << 2, 0, 0, 3, 1, 1;
    Eigen::Vector3d b(2, 3, 2.5);
    Eigen::Vector2d xls = (A.transpose() * A).ldlt().solve(A.transpose() * b);
    CHECK(t.iterates[1].at(0) == doctest::Approx(xls(0)).epsilon(1e-8));
    CHECK(t.iterates[1].at(1) == doctest::Approx(xls(1)).epsilon(1e-8));
    // already converged after one step: the second step does not move
    CHECK(t.final_x().at(0) == doctest::Approx(xls(0)).epsilon(1e-8));
}

TEST_CASE("gd with unit step solves r(x) = x - c in one step") {
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {7, -3});
    Tensor c = Tensor::constant({2}, {1.5, 2.5});
    p.residual = [c](const Tensor& x) { return x - c; };
    p.jacobian = [](const Tensor&) {
        return Tensor::constant({2, 2}, {1, 0, 0, 1});
    };
    GdOptions opts;
    opts.step_size = 1.0;
    SolverTrace t = solve_gd(p, 1, opts);
    CHECK(t.final_x().at(0) == doctest::Approx(1.5));
    CHECK(t.final_x().at(1) == doctest::Approx(2.5));
}

TEST_CASE("classic lm matches an independent trusted lm on rosenbrock") {
    auto p = rosenbrock_problem();
    SolverTrace mine = solve_lm(p, 200);

    RosenbrockFunctor f;
    Eigen::LevenbergMarquardt<RosenbrockFunctor> reference(f);
    Eigen::VectorXd x(2);
    x << -1.2, 1.0;
    reference.minimize(x);
    Eigen::VectorXd r(2);
    f(x, r);
    const double ref_cost = r.squaredNorm();
    CHECK(std::abs(mine.final_cost_value() - ref_cost) < 1e-8);
}

TEST_CASE("lm falls back to a ridge on singular normal equations") {
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {1, 1});
    // residual ignores x2 entirely: J has a zero column
    p.residual = [](const Tensor& x) {
        Tensor x1 = select(x, 0, 0);
        return stack({x1 - 2.0, 2.0 * (x1 - 2.0)}, 0);
    };
    p.jacobian = [](const Tensor&) {
        return Tensor::constant({2, 2}, {1, 0, 2, 0});
    };
    SolverTrace t = solve_gn(p, 3);
    CHECK(!t.warnings.empty());
    CHECK(std::isfinite(t.final_x().at(0)));
}

TEST_CASE("reference jacobian fallback: row-wise reverse mode") {
    // root at (1, 0.2)
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {0.8, 0.35});
    p.residual = [](const Tensor& x) {
        Tensor x1 = select(x, 0, 0), x2 = select(x, 0, 1);
        return stack({x1 * x1 - 1.0, x1 * x2 - 0.2, exp(x2) - std::exp(0.2)}, 0);
    };
    // no jacobian provided on purpose
    SolverTrace t = solve_gn(p, 25);
    CHECK(t.final_cost_value() < 1e-14);
    CHECK(t.final_x().at(0) == doctest::Approx(1.0));
    CHECK(t.final_x().at(1) == doctest::Approx(0.2));
}

TEST_CASE("gating limits of the damping logistic") {
    GatingParams g;
    g.D = 1.0;  // midpoint case
    GatingTensors gates = GatingTensors::constants(g);
    auto lambda_of = [&](double dr) {
        Tensor d = Tensor::scalar(dr);
        return (gates.lambda_min +
                (gates.lambda_max - gates.lambda_min) / (1.0 + gates.D * exp(neg(gates.sigma * d))))
            .value();
    };
    CHECK(std::abs(lambda_of(1e12) - g.lambda_max) < 1e-9);   // much worse step
    CHECK(std::abs(lambda_of(-1e12) - g.lambda_min) < 1e-9);  // much better step
    // D = 1 midpoint at r1 == r0
    CHECK(lambda_of(0.0) == doctest::Approx((g.lambda_min + g.lambda_max) / 2.0));
}

TEST_CASE("gradlm lambda trace stays within [lambda_min, lambda_max]") {
    auto p = rosenbrock_problem();
    GatingParams g;
    SolverTrace t = solve_gradlm(p, 50, g);
    for (double l : t.lambdas) {
        CHECK(l >= g.lambda_min);
        CHECK(l <= g.lambda_max);
    }
    CHECK(t.lambdas.size() == 50);
    CHECK(t.iterates.size() == 51);
    CHECK(t.residual_norms.size() == 51);
}

TEST_CASE("gradlm: iterate update is a convex blend toward the trial step") {
    auto p = rosenbrock_problem();
    SolverTrace t = solve_gradlm(p, 30);
    // every iterate moves from x_t toward x_t + dx by a factor in (0,1):
    // verified indirectly by the residual norm being non-increasing on this
    // well-posed problem
    for (size_t i = 1; i < t.residual_norms.size(); ++i)
        CHECK(t.residual_norms[i] <= t.residual_norms[i - 1] * (1.0 + 1e-12));
    // the memoryless damping gate crawls near dr = 0, so full convergence on
    // the banana valley is not expected; substantial monotone progress is
    CHECK(t.final_cost_value() < t.residual_norms.front() * 0.25);
}

TEST_CASE("steep gates reduce gradlm to a hard two-level switch on a quadratic") {
    LeastSquaresProblem p;
    p.x0 = Tensor::constant({2}, {3.0, -2.0});
    Tensor A = Tensor::constant({2, 2}, {1.3, 0.2, 0.2, 0.9});
    p.residual = [A](const Tensor& x) { return matmul(A, x.reshape({2, 1})).reshape({2}); };
    p.jacobian = [A](const Tensor&) { return A; };

    GatingParams soft;
    soft.sigma = 1e12;  // sigma -> inf
    soft.step_steepness = 1e12;
    soft.D = 1.0;
    SolverTrace smooth = solve_gradlm(p, 12, soft);

    // hard two-level reference: lambda in {lambda_min, lambda_max}, full
    // accept/reject of the damped step
    Eigen::Matrix2d Ae;
    Ae << 1.3, 0.2, 0.2, 0.9;
    Eigen::Vector2d x(3.0, -2.0);
    double lambda = soft.lambda_init;
    for (int it = 0; it < 12; ++it) {
        Eigen::Matrix2d JtJ = Ae.transpose() * Ae;
        Eigen::Matrix2d M = JtJ;
        M.diagonal() += lambda * JtJ.diagonal();
        M.diagonal().array() += 1e-10;  // same ridge policy as the solver
        Eigen::Vector2d dx = M.ldlt().solve(-Ae.transpose() * (Ae * x));
        const double nrm = std::sqrt(dx.squaredNorm() + 1e-30);
        dx *= soft.max_step / (nrm + soft.max_step);
        const double r0 = (Ae * x).squaredNorm();
        const double r1 = (Ae * (x + dx)).squaredNorm();
        lambda = (r1 > r0) ? soft.lambda_max : soft.lambda_min;
        if (r1 < r0) x += dx;  // steep gate: full accept or full reject
    }
    CHECK(std::abs(smooth.final_x().at(0) - x(0)) < 1e-6);
    CHECK(std::abs(smooth.final_x().at(1) - x(1)) < 1e-6);
}

TEST_CASE("gradlm is deterministic") {
    auto run = [] {
        auto p = rosenbrock_problem();
        return solve_gradlm(p, 25).final_x().to_vector();
    };
    auto a = run();
    auto b = run();
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
}

TEST_CASE("gradient of the unrolled 10-iteration solve matches finite differences") {
    std::mt19937_64 rng(2024);
    CurveInstance inst = make_curve_instance(CurveFamily::sine, rng, 25);
    auto build = [&](const Tensor& x0_leaf) {
        LeastSquaresProblem p = curve_problem(inst);
        p.x0 = x0_leaf;
        SolverTrace t = solve_gradlm(p, 10);
        return t.final_cost;
    };
    std::vector<double> x0 = {inst.x0[0], inst.x0[1], inst.x0[2]};
    auto r = check_leaf_gradient({3}, x0, build, 1e-5);
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("gradlm differentiates w.r.t. the gating parameters") {
    std::mt19937_64 rng(7);
    CurveInstance inst = make_curve_instance(CurveFamily::exponential, rng, 25);
    GatingParams opts;
    auto build = [&](const Tensor& gate_leaf) {
        LeastSquaresProblem p = curve_problem(inst);
        GatingTensors gates;
        gates.lambda_min = Tensor::scalar(opts.lambda_min);
        gates.lambda_max = select(gate_leaf, 0, 0);
        gates.D = select(gate_leaf, 0, 1);
        gates.sigma = select(gate_leaf, 0, 2);
        SolverTrace t = solve_gradlm(p, 8, gates, opts);
        return t.final_cost;
    };
    std::vector<double> g0 = {50.0, 1.0, 10.0};
    auto r = check_leaf_gradient({3}, g0, build, 1e-4);
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("paper-literal iterate gate is available behind the flag") {
    auto p = rosenbrock_problem();
    GatingParams literal;
    literal.paper_literal_qx_sign = true;
    SolverTrace t = solve_gradlm(p, 5, literal);
    SolverTrace s = solve_gradlm(p, 5);
    // the two conventions genuinely differ
    CHECK(t.final_x().at(0) != s.final_x().at(0));
}

TEST_CASE("curve families: zero error when started at ground truth") {
    std::mt19937_64 rng(5);
    for (CurveFamily family :
         {CurveFamily::exponential, CurveFamily::sine, CurveFamily::sinc}) {
        CurveInstance inst = make_curve_instance(family, rng, 30);
        inst.x0 = inst.gt;
        LeastSquaresProblem p = curve_problem(inst);
        Tensor r0 = p.residual(p.x0);
        for (double v : r0.data()) CHECK(std::abs(v) < 1e-12);
        SolverTrace t = solve_gradlm(p, 5);
        CHECK(t.final_cost_value() < 1e-10);
        SolverTrace l = solve_lm(p, 5);
        CHECK(l.final_cost_value() < 1e-20);
    }
}

TEST_CASE("curve jacobians match row-wise reverse differentiation") {
    std::mt19937_64 rng(31);
    for (CurveFamily family :
         {CurveFamily::exponential, CurveFamily::sine, CurveFamily::sinc}) {
        CAPTURE(to_string(family));
        CurveInstance inst = make_curve_instance(family, rng, 12);
        LeastSquaresProblem p = curve_problem(inst);
        Tensor J = p.jacobian(p.x0);
        const Index m = J.dim(0);
        // oracle: differentiate each residual row through the tape
        for (Index i = 0; i < m; ++i) {
            Tape tape;
            Tensor leaf = tape.leaf({3}, p.x0.to_vector());
            Tensor r = p.residual(leaf);
            tape.backward(select(r, 0, i));
            Tensor g = leaf.grad();
            for (Index j = 0; j < 3; ++j) {
                const double a = J.at({i, j});
                const double b = g.defined() ? g.at(j) : 0.0;
                CHECK(std::abs(a - b) < 1e-9 * std::max(1.0, std::abs(b)));
            }
        }
    }
}

TEST_CASE("curve suite emits the full grid and tracks lm closely") {
    CurveSuiteConfig cfg;
    cfg.n_instances = 8;
    cfg.budgets = {10};
    cfg.seed = 99;
    CurveSuiteResult res = curve_suite(cfg);
    CHECK(res.rows.size() == 3 * 4 * 1);
    std::string csv = res.to_csv();
    CHECK(csv.find("family,solver,max_iters") == 0);
    CHECK(csv.find("sinc,gradlm,10") != std::string::npos);

    // identical seeds reproduce identical tables
    CurveSuiteResult res2 = curve_suite(cfg);
    CHECK(res.to_csv() == res2.to_csv());
}
