#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "diffslam/least_squares.hpp"

namespace diffslam {

// Three-parameter nonlinear fitting families:
//   exponential: a exp(-(x - t)^2 / (2 w^2))
//   sine:        sin(a x + t x + w)
//   sinc:        sinc(a x + t x + w)
enum class CurveFamily { exponential, sine, sinc };
enum class SolverKind { gd, gn, lm, gradlm };

const char* to_string(CurveFamily f);
const char* to_string(SolverKind s);

struct CurveInstance {
    CurveFamily family;
    std::array<double, 3> gt;  // a, t, w
    std::array<double, 3> x0;
    std::vector<double> xs;
    std::vector<double> ys;  // f(xs; gt)
};

// Ground truth and initial guess sampled uniformly in [-6, 6]; samples on a
// fixed grid over the same interval.
CurveInstance make_curve_instance(CurveFamily family, std::mt19937_64& rng, int n_samples = 50);

double curve_eval(CurveFamily family, const std::array<double, 3>& p, double x);

// Residual r(p) = f(xs; p) - ys with an analytic on-tape jacobian.
LeastSquaresProblem curve_problem(const CurveInstance& instance);

struct CurveSuiteRow {
    CurveFamily family;
    SolverKind solver;
    int max_iters;
    double mse_a, mse_t, mse_w;  // parameter-space squared errors (mean)
    double mse_f;                // function-space mean squared error
};

struct CurveSuiteResult {
    std::vector<CurveSuiteRow> rows;
    std::string to_csv() const;  // header + one line per row
};

struct CurveSuiteConfig {
    std::vector<CurveFamily> families{CurveFamily::exponential, CurveFamily::sine,
                                      CurveFamily::sinc};
    std::vector<int> budgets{10, 50, 100};
    int n_instances = 100;
    std::uint64_t seed = 0;
    GatingParams gating;
    GdOptions gd;
    LmOptions lm;
};

CurveSuiteResult curve_suite(const CurveSuiteConfig& config);

}  // namespace diffslam
