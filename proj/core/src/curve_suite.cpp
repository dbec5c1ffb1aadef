#include "diffslam/curve_suite.hpp"

#include <cmath>
#include <sstream>

namespace diffslam {

namespace {
const double kWidthGuard = 1e-12;  // keeps the exponential well-defined as w -> 0
const double kSincBranch = 1e-3;   // |z| below which the Taylor branch is used

double sinc(double z) {
    if (std::abs(z) < kSincBranch) return 1.0 - z * z / 6.0 + z * z * z * z / 120.0;
    return std::sin(z) / z;
}

// sinc of a tensor with the same per-element branch as the scalar version.
Tensor sinc_t(const Tensor& z) {
    const Index n = z.numel();
    std::vector<std::uint8_t> small(static_cast<size_t>(n));
    auto zd = z.data();
    for (Index i = 0; i < n; ++i) small[static_cast<size_t>(i)] = std::abs(zd[i]) < kSincBranch;
    Tensor z2 = z * z;
    Tensor taylor = 1.0 - z2 / 6.0 + z2 * z2 / 120.0;
    Tensor z_safe = where_mask(small, Tensor::full(z.shape(), 1.0), z);
    Tensor ratio = sin(z_safe) / z_safe;
    return where_mask(small, taylor, ratio);
}

// d sinc / dz = (cos z - sinc z) / z, Taylor -z/3 + z^3/30 near zero.
Tensor dsinc_t(const Tensor& z) {
    const Index n = z.numel();
    std::vector<std::uint8_t> small(static_cast<size_t>(n));
    auto zd = z.data();
    for (Index i = 0; i < n; ++i) small[static_cast<size_t>(i)] = std::abs(zd[i]) < kSincBranch;
    Tensor taylor = neg(z) / 3.0 + (z * z * z) / 30.0;
    Tensor z_safe = where_mask(small, Tensor::full(z.shape(), 1.0), z);
    Tensor ratio = (cos(z_safe) - sin(z_safe) / z_safe) / z_safe;
    return where_mask(small, taylor, ratio);
}

}  // namespace

const char* to_string(CurveFamily f) {
    switch (f) {
        case CurveFamily::exponential: return "exponential";
        case CurveFamily::sine: return "sine";
        case CurveFamily::sinc: return "sinc";
    }
    return "?";
}

const char* to_string(SolverKind s) {
    switch (s) {
        case SolverKind::gd: return "gd";
        case SolverKind::gn: return "gn";
        case SolverKind::lm: return "lm";
        case SolverKind::gradlm: return "gradlm";
    }
    return "?";
}

double curve_eval(CurveFamily family, const std::array<double, 3>& p, double x) {
    const double a = p[0], t = p[1], w = p[2];
    switch (family) {
        case CurveFamily::exponential: {
            const double d = x - t;
            return a * std::exp(-d * d / (2.0 * (w * w + kWidthGuard)));
        }
        case CurveFamily::sine: return std::sin(a * x + t * x + w);
        case CurveFamily::sinc: return sinc(a * x + t * x + w);
    }
    return 0.0;
}

CurveInstance make_curve_instance(CurveFamily family, std::mt19937_64& rng, int n_samples) {
    std::uniform_real_distribution<double> box(-6.0, 6.0);
    CurveInstance inst;
    inst.family = family;
    for (auto& v : inst.gt) v = box(rng);
    for (auto& v : inst.x0) v = box(rng);
    inst.xs.resize(static_cast<size_t>(n_samples));
    inst.ys.resize(static_cast<size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        inst.xs[static_cast<size_t>(i)] = -6.0 + 12.0 * i / (n_samples - 1.0);
        inst.ys[static_cast<size_t>(i)] = curve_eval(family, inst.gt, inst.xs[static_cast<size_t>(i)]);
    }
    return inst;
}

LeastSquaresProblem curve_problem(const CurveInstance& instance) {
    const Index m = static_cast<Index>(instance.xs.size());
    Tensor xs = Tensor::constant({m}, instance.xs);
    Tensor ys = Tensor::constant({m}, instance.ys);
    const CurveFamily family = instance.family;

    LeastSquaresProblem problem;
    problem.x0 = Tensor::constant({3}, {instance.x0[0], instance.x0[1], instance.x0[2]});
    problem.residual = [family, xs, ys](const Tensor& p) -> Tensor {
        Tensor a = select(p, 0, 0), t = select(p, 0, 1), w = select(p, 0, 2);
        switch (family) {
            case CurveFamily::exponential: {
                Tensor d = xs - t;
                Tensor w2 = w * w + kWidthGuard;
                return a * exp(neg(d * d) / (2.0 * w2)) - ys;
            }
            case CurveFamily::sine: return sin((a + t) * xs + w) - ys;
            case CurveFamily::sinc: return sinc_t((a + t) * xs + w) - ys;
        }
        throw ContractError("unknown curve family");
    };
    problem.jacobian = [family, xs](const Tensor& p) -> Tensor {
        Tensor a = select(p, 0, 0), t = select(p, 0, 1), w = select(p, 0, 2);
        switch (family) {
            case CurveFamily::exponential: {
                Tensor d = xs - t;
                Tensor w2 = w * w + kWidthGuard;
                Tensor e = exp(neg(d * d) / (2.0 * w2));
                Tensor da = e;
                Tensor dt = a * e * d / w2;
                Tensor dw = a * e * (d * d) * w / (w2 * w2);
                return stack({da, dt, dw}, 1);
            }
            case CurveFamily::sine: {
                Tensor c = cos((a + t) * xs + w);
                return stack({c * xs, c * xs, c}, 1);
            }
            case CurveFamily::sinc: {
                Tensor z = (a + t) * xs + w;
                Tensor dz = dsinc_t(z);
                return stack({dz * xs, dz * xs, dz}, 1);
            }
        }
        throw ContractError("unknown curve family");
    };
    return problem;
}

std::string CurveSuiteResult::to_csv() const {
    std::ostringstream os;
    os << "family,solver,max_iters,mse_a,mse_t,mse_w,mse_f\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << to_string(r.family) << "," << to_string(r.solver) << "," << r.max_iters << ","
           << r.mse_a << "," << r.mse_t << "," << r.mse_w << "," << r.mse_f << "\n";
    }
    return os.str();
}

CurveSuiteResult curve_suite(const CurveSuiteConfig& config) {
    if (config.n_instances < 1) throw ContractError("curve_suite: n_instances must be >= 1");
    static const SolverKind kSolvers[] = {SolverKind::gd, SolverKind::gn, SolverKind::lm,
                                          SolverKind::gradlm};
    CurveSuiteResult result;
    std::mt19937_64 rng(config.seed);

    for (CurveFamily family : config.families) {
        std::vector<CurveInstance> instances;
        instances.reserve(static_cast<size_t>(config.n_instances));
        for (int i = 0; i < config.n_instances; ++i)
            instances.push_back(make_curve_instance(family, rng));

        for (int budget : config.budgets) {
            for (SolverKind solver : kSolvers) {
                CurveSuiteRow row{family, solver, budget, 0, 0, 0, 0};
                for (const CurveInstance& inst : instances) {
                    LeastSquaresProblem problem = curve_problem(inst);
                    SolverTrace trace;
                    switch (solver) {
                        case SolverKind::gd: trace = solve_gd(problem, budget, config.gd); break;
                        case SolverKind::gn: trace = solve_gn(problem, budget); break;
                        case SolverKind::lm: trace = solve_lm(problem, budget, config.lm); break;
                        case SolverKind::gradlm:
                            trace = solve_gradlm(problem, budget, config.gating);
                            break;
                    }
                    const Tensor& xf = trace.final_x();
                    std::array<double, 3> pred{xf.at(0), xf.at(1), xf.at(2)};
                    row.mse_a += (pred[0] - inst.gt[0]) * (pred[0] - inst.gt[0]);
                    row.mse_t += (pred[1] - inst.gt[1]) * (pred[1] - inst.gt[1]);
                    row.mse_w += (pred[2] - inst.gt[2]) * (pred[2] - inst.gt[2]);
                    double f_err = 0.0;
                    for (size_t i = 0; i < inst.xs.size(); ++i) {
                        const double d = curve_eval(family, pred, inst.xs[i]) - inst.ys[i];
                        f_err += d * d;
                    }
                    row.mse_f += f_err / static_cast<double>(inst.xs.size());
                }
                const double n = static_cast<double>(config.n_instances);
                row.mse_a /= n;
                row.mse_t /= n;
                row.mse_w /= n;
                row.mse_f /= n;
                result.rows.push_back(row);
            }
        }
    }
    return result;
}

}  // namespace diffslam
