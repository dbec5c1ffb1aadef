#include "diffslam/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace diffslam {

namespace {

using DataPtr = std::shared_ptr<const std::vector<double>>;

// Broadcast plan over trailing dimensions. Stride 0 marks a broadcast dim.
struct Bcast {
    Shape out;
    std::vector<Index> sa, sb;
    Index n = 0;
};

Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
    size_t rank = std::max(a.size(), b.size());
    Bcast bc;
    bc.out.resize(rank);
    bc.sa.assign(rank, 0);
    bc.sb.assign(rank, 0);
    // shapes padded with 1s on the left
    std::vector<Index> da(rank, 1), db(rank, 1);
    std::copy(a.begin(), a.end(), da.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), db.begin() + (rank - b.size()));
    for (size_t i = 0; i < rank; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        bc.out[i] = std::max(da[i], db[i]);
    }
    // row-major strides, zeroed on broadcast dims
    Index stra = 1, strb = 1;
    for (size_t i = rank; i-- > 0;) {
        bc.sa[i] = (da[i] == 1) ? 0 : stra;
        bc.sb[i] = (db[i] == 1) ? 0 : strb;
        stra *= da[i];
        strb *= db[i];
    }
    bc.n = numel_of(bc.out);
    return bc;
}

// Calls f(i, offset_a, offset_b) for every output element in row-major order.
template <class F>
void bcast_for_each(const Bcast& bc, F&& f) {
    const size_t rank = bc.out.size();
    if (bc.n == 0) return;
    if (rank == 0) {
        f(Index{0}, Index{0}, Index{0});
        return;
    }
    std::vector<Index> idx(rank, 0);
    Index ia = 0, ib = 0;
    for (Index i = 0; i < bc.n; ++i) {
        f(i, ia, ib);
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += bc.sa[d];
            ib += bc.sb[d];
            if (idx[d] < bc.out[d]) break;
            ia -= bc.sa[d] * bc.out[d];
            ib -= bc.sb[d] * bc.out[d];
            idx[d] = 0;
        }
    }
}

using BinF = double (*)(double, double);
using BinDF = double (*)(double a, double b, double y);

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, BinF f, BinDF dfa, BinDF dfb) {
    if (!a.defined() || !b.defined()) throw ContractError(std::string(name) + ": undefined operand");
    Tape* tape = common_tape({&a, &b});
    Bcast bc = make_bcast(a.shape(), b.shape(), name);
    std::vector<double> y(static_cast<size_t>(bc.n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const bool same = a.shape() == b.shape();
    if (same) {
        for (Index i = 0; i < bc.n; ++i) y[static_cast<size_t>(i)] = f(pa[i], pb[i]);
    } else {
        bcast_for_each(bc, [&](Index i, Index ia, Index ib) { y[static_cast<size_t>(i)] = f(pa[ia], pb[ib]); });
    }
    if (!tape) return Tensor::constant(std::move(bc.out), std::move(y));

    tape->store_all(y);
    auto ydata = std::make_shared<const std::vector<double>>(std::move(y));
    DataPtr adata = a.storage();
    DataPtr bdata = b.storage();
    const Index anode = a.requires_grad() ? a.node() : -1;
    const Index bnode = b.requires_grad() ? b.node() : -1;
    std::vector<Index> parents;
    if (anode >= 0) parents.push_back(anode);
    if (bnode >= 0) parents.push_back(bnode);
    Shape out_shape = bc.out;
    auto backward = [bc, ydata, adata, bdata, anode, bnode, dfa, dfb, same](
                        std::span<const double> up, Tape& t) {
        const double* py = ydata->data();
        const double* pa = adata->data();
        const double* pb = bdata->data();
        double* ga = anode >= 0 ? t.grad_slot(anode) : nullptr;
        double* gb = bnode >= 0 ? t.grad_slot(bnode) : nullptr;
        if (same) {
            for (Index i = 0; i < bc.n; ++i) {
                if (ga) ga[i] += up[static_cast<size_t>(i)] * dfa(pa[i], pb[i], py[i]);
                if (gb) gb[i] += up[static_cast<size_t>(i)] * dfb(pa[i], pb[i], py[i]);
            }
        } else {
            bcast_for_each(bc, [&](Index i, Index ia, Index ib) {
                if (ga) ga[ia] += up[static_cast<size_t>(i)] * dfa(pa[ia], pb[ib], py[i]);
                if (gb) gb[ib] += up[static_cast<size_t>(i)] * dfb(pa[ia], pb[ib], py[i]);
            });
        }
    };
    return tape->emit_shared(std::move(out_shape), std::move(ydata), std::move(parents), std::move(backward));
}

using UnF = double (*)(double);
using UnDF = double (*)(double x, double y);

Tensor unary_op(const Tensor& a, const char* name, UnF f, UnDF df) {
    if (!a.defined()) throw ContractError(std::string(name) + ": undefined operand");
    const Index n = a.numel();
    std::vector<double> y(static_cast<size_t>(n));
    const double* pa = a.data().data();
    for (Index i = 0; i < n; ++i) y[static_cast<size_t>(i)] = f(pa[i]);
    if (!a.requires_grad()) return Tensor::constant(a.shape(), std::move(y));

    Tape* tape = a.tape();
    tape->store_all(y);
    auto ydata = std::make_shared<const std::vector<double>>(std::move(y));
    DataPtr adata = a.storage();
    const Index anode = a.node();
    auto backward = [n, ydata, adata, anode, df](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        const double* pa = adata->data();
        const double* py = ydata->data();
        for (Index i = 0; i < n; ++i) ga[i] += up[static_cast<size_t>(i)] * df(pa[i], py[i]);
    };
    return tape->emit_shared(a.shape(), std::move(ydata), {anode}, std::move(backward));
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using EMapC = Eigen::Map<const EMat>;

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double z) { return -z / y; });
}

Tensor neg(const Tensor& a) {
    return unary_op(
        a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sin(const Tensor& a) {
    return unary_op(
        a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary_op(
        a, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor acos(const Tensor& a) {
    return unary_op(
        a, "acos", [](double x) { return std::acos(x); },
        [](double x, double) { return -1.0 / std::sqrt(1.0 - x * x); });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid",
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor pow(const Tensor& a, double e) {
    Tensor r = pow(a, Tensor::scalar(e));
    return r;
}

Tensor pow(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "pow", [](double x, double y) { return std::pow(x, y); },
        [](double x, double y, double) { return y * std::pow(x, y - 1.0); },
        [](double x, double, double z) { return z * std::log(x); });
}

Tensor clamp_smooth(const Tensor& x, double lo, double hi, double steepness) {
    if (!(hi > lo)) throw ContractError("clamp_smooth: requires hi > lo");
    const double span = hi - lo;
    const double mid = 0.5 * (lo + hi);
    // slope at the midpoint equals `steepness`
    return lo + span * sigmoid((x - mid) * (4.0 * steepness / span));
}

Tensor smooth_max(const Tensor& a, const Tensor& b, double k) {
    Tensor s = sigmoid((a - b) * k);
    return s * a + (1.0 - s) * b;
}

Tensor smooth_min(const Tensor& a, const Tensor& b, double k) {
    Tensor s = sigmoid((b - a) * k);
    return s * a + (1.0 - s) * b;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    if (!a.defined()) throw ContractError("sum: undefined operand");
    const Index n = a.numel();
    const double* pa = a.data().data();
    double acc = 0.0;
    for (Index i = 0; i < n; ++i) acc += pa[i];
    if (!a.requires_grad()) return Tensor::scalar(acc);
    Tape* tape = a.tape();
    const Index anode = a.node();
    auto backward = [n, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        for (Index i = 0; i < n; ++i) ga[i] += up[0];
    };
    return tape->emit({}, {acc}, {anode}, std::move(backward));
}

Tensor mean(const Tensor& a) {
    const Index n = a.numel();
    if (n == 0) throw ContractError("mean: empty tensor");
    return sum(a) / static_cast<double>(n);
}

namespace {

// Maps each input flat index to the output flat index of a reduction.
struct ReducePlan {
    Shape out_shape;
    std::vector<Index> out_index;  // per input element
    Index out_n = 0;
};

ReducePlan make_reduce_plan(const Shape& shape, const std::vector<Index>& axes, bool keepdims) {
    const size_t rank = shape.size();
    std::vector<bool> reduced(rank, false);
    for (Index ax : axes) {
        Index a = ax < 0 ? ax + static_cast<Index>(rank) : ax;
        if (a < 0 || a >= static_cast<Index>(rank))
            throw ShapeError("reduce: axis " + std::to_string(ax) + " invalid for shape " + shape_str(shape));
        reduced[static_cast<size_t>(a)] = true;
    }
    ReducePlan plan;
    for (size_t d = 0; d < rank; ++d) {
        if (!reduced[d]) plan.out_shape.push_back(shape[d]);
        else if (keepdims) plan.out_shape.push_back(1);
    }
    plan.out_n = numel_of(plan.out_shape);
    // output strides laid over the input's dims (0 on reduced dims)
    std::vector<Index> ostr(rank, 0);
    Index s = 1;
    for (size_t d = rank; d-- > 0;) {
        if (!reduced[d]) {
            ostr[d] = s;
            s *= shape[d];
        }
    }
    const Index n = numel_of(shape);
    plan.out_index.resize(static_cast<size_t>(n));
    std::vector<Index> idx(rank, 0);
    Index o = 0;
    for (Index i = 0; i < n; ++i) {
        plan.out_index[static_cast<size_t>(i)] = o;
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            o += ostr[d];
            if (idx[d] < shape[d]) break;
            o -= ostr[d] * shape[d];
            idx[d] = 0;
        }
    }
    return plan;
}

}  // namespace

Tensor sum(const Tensor& a, const std::vector<Index>& axes, bool keepdims) {
    if (!a.defined()) throw ContractError("sum: undefined operand");
    if (axes.empty()) return keepdims ? a : a;
    auto plan = std::make_shared<const ReducePlan>(make_reduce_plan(a.shape(), axes, keepdims));
    const Index n = a.numel();
    std::vector<double> y(static_cast<size_t>(plan->out_n), 0.0);
    const double* pa = a.data().data();
    for (Index i = 0; i < n; ++i) y[static_cast<size_t>(plan->out_index[static_cast<size_t>(i)])] += pa[i];
    if (!a.requires_grad()) return Tensor::constant(plan->out_shape, std::move(y));
    Tape* tape = a.tape();
    const Index anode = a.node();
    Shape out_shape = plan->out_shape;
    auto backward = [n, plan, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        for (Index i = 0; i < n; ++i) ga[i] += up[static_cast<size_t>(plan->out_index[static_cast<size_t>(i)])];
    };
    return tape->emit(std::move(out_shape), std::move(y), {anode}, std::move(backward));
}

Tensor mean(const Tensor& a, const std::vector<Index>& axes, bool keepdims) {
    Tensor s = sum(a, axes, keepdims);
    const Index denom = a.numel() / std::max<Index>(1, s.numel());
    return s / static_cast<double>(denom);
}

Tensor softmax(const Tensor& a, Index axis) {
    if (!a.defined()) throw ContractError("softmax: undefined operand");
    const Index rank = a.ndim();
    Index ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw ShapeError("softmax: axis invalid for shape " + shape_str(a.shape()));
    Index outer = 1, inner = 1;
    const Index n = a.dim(ax);
    for (Index d = 0; d < ax; ++d) outer *= a.dim(d);
    for (Index d = ax + 1; d < rank; ++d) inner *= a.dim(d);

    const double* pa = a.data().data();
    std::vector<double> y(static_cast<size_t>(a.numel()));
    for (Index o = 0; o < outer; ++o) {
        for (Index in = 0; in < inner; ++in) {
            const Index base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (Index k = 0; k < n; ++k) mx = std::max(mx, pa[base + k * inner]);
            double z = 0.0;
            for (Index k = 0; k < n; ++k) z += std::exp(pa[base + k * inner] - mx);
            for (Index k = 0; k < n; ++k)
                y[static_cast<size_t>(base + k * inner)] = std::exp(pa[base + k * inner] - mx) / z;
        }
    }
    if (!a.requires_grad()) return Tensor::constant(a.shape(), std::move(y));
    Tape* tape = a.tape();
    tape->store_all(y);
    auto ydata = std::make_shared<const std::vector<double>>(std::move(y));
    const Index anode = a.node();
    auto backward = [outer, inner, n, ydata, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        const double* py = ydata->data();
        for (Index o = 0; o < outer; ++o) {
            for (Index in = 0; in < inner; ++in) {
                const Index base = o * n * inner + in;
                double s = 0.0;
                for (Index k = 0; k < n; ++k) {
                    const Index j = base + k * inner;
                    s += up[static_cast<size_t>(j)] * py[j];
                }
                for (Index k = 0; k < n; ++k) {
                    const Index j = base + k * inner;
                    ga[j] += py[j] * (up[static_cast<size_t>(j)] - s);
                }
            }
        }
    };
    return tape->emit_shared(a.shape(), std::move(ydata), {anode}, std::move(backward));
}

Tensor softmin(const Tensor& a, Index axis) { return softmax(neg(a), axis); }

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const Index m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tape* tape = common_tape({&a, &b});
    std::vector<double> y(static_cast<size_t>(m * n));
    {
        EMapC A(a.data().data(), m, k), B(b.data().data(), k, n);
        EMap(y.data(), m, n).noalias() = A * B;
    }
    if (!tape) return Tensor::constant({m, n}, std::move(y));
    tape->store_all(y);
    DataPtr adata = a.storage();
    DataPtr bdata = b.storage();
    const Index anode = a.requires_grad() ? a.node() : -1;
    const Index bnode = b.requires_grad() ? b.node() : -1;
    std::vector<Index> parents;
    if (anode >= 0) parents.push_back(anode);
    if (bnode >= 0) parents.push_back(bnode);
    auto backward = [m, k, n, adata, bdata, anode, bnode](std::span<const double> up, Tape& t) {
        EMapC U(up.data(), m, n);
        if (anode >= 0) {
            EMapC B(bdata->data(), k, n);
            EMap(t.grad_slot(anode), m, k).noalias() += U * B.transpose();
        }
        if (bnode >= 0) {
            EMapC A(adata->data(), m, k);
            EMap(t.grad_slot(bnode), k, n).noalias() += A.transpose() * U;
        }
    };
    return tape->emit({m, n}, std::move(y), std::move(parents), std::move(backward));
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expects 2-D, got " + shape_str(a.shape()));
    const Index m = a.dim(0), n = a.dim(1);
    std::vector<double> y(static_cast<size_t>(m * n));
    const double* pa = a.data().data();
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) y[static_cast<size_t>(j * m + i)] = pa[i * n + j];
    if (!a.requires_grad()) return Tensor::constant({n, m}, std::move(y));
    Tape* tape = a.tape();
    const Index anode = a.node();
    auto backward = [m, n, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < n; ++j) ga[i * n + j] += up[static_cast<size_t>(j * m + i)];
    };
    return tape->emit({n, m}, std::move(y), {anode}, std::move(backward));
}

Tensor linear_solve(const Tensor& A, const Tensor& b, bool* warned) {
    if (A.ndim() != 2 || A.dim(0) != A.dim(1))
        throw ShapeError("linear_solve: A must be square, got " + shape_str(A.shape()));
    const Index k = A.dim(0);
    const bool vec = b.ndim() == 1;
    if ((vec && b.dim(0) != k) || (!vec && (b.ndim() != 2 || b.dim(0) != k)))
        throw ShapeError("linear_solve: b shape " + shape_str(b.shape()) + " incompatible with A " +
                         shape_str(A.shape()));
    const Index n = vec ? 1 : b.dim(1);

    Eigen::MatrixXd Ae = EMapC(A.data().data(), k, k);
    if (warned) {
        Eigen::FullPivLU<Eigen::MatrixXd> probe(Ae);
        if (!probe.isInvertible() || probe.rcond() < 1e-14) *warned = true;
    }
    // The unconditional absolute ridge keeps directions the system does not
    // observe (rows ~ 0) at zero step instead of amplifying noise; it is
    // negligible against any healthy diagonal.
    Ae.diagonal().array() += 1e-10;
    auto lu = std::make_shared<const Eigen::PartialPivLU<Eigen::MatrixXd>>(Ae);
    Eigen::MatrixXd be = EMapC(b.data().data(), k, n);
    Eigen::MatrixXd xe = lu->solve(be);

    std::vector<double> y(static_cast<size_t>(k * n));
    EMap(y.data(), k, n) = xe;
    Shape out_shape = b.shape();
    Tape* tape = common_tape({&A, &b});
    if (!tape) return Tensor::constant(std::move(out_shape), std::move(y));
    tape->store_all(y);
    auto ydata = std::make_shared<const std::vector<double>>(std::move(y));
    const Index an = A.requires_grad() ? A.node() : -1;
    const Index bn = b.requires_grad() ? b.node() : -1;
    std::vector<Index> parents;
    if (an >= 0) parents.push_back(an);
    if (bn >= 0) parents.push_back(bn);
    auto backward = [k, n, lu, ydata, an, bn](std::span<const double> up, Tape& t) {
        EMapC U(up.data(), k, n);
        // gb = A^-T * upstream ; gA = -gb * x^T
        Eigen::MatrixXd gb = lu->transpose().solve(Eigen::MatrixXd(U));
        if (bn >= 0) EMap(t.grad_slot(bn), k, n) += gb;
        if (an >= 0) {
            EMapC X(ydata->data(), k, n);
            EMap(t.grad_slot(an), k, k).noalias() -= gb * X.transpose();
        }
    };
    return tape->emit_shared(std::move(out_shape), std::move(ydata), std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, Index axis) {
    if (parts.empty()) throw ContractError("concat: no parts");
    const Index rank = parts[0].ndim();
    Index ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw ShapeError("concat: axis invalid");
    Shape out = parts[0].shape();
    Index total_ax = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != rank) throw ShapeError("concat: rank mismatch");
        for (Index d = 0; d < rank; ++d)
            if (d != ax && p.dim(d) != out[static_cast<size_t>(d)])
                throw ShapeError("concat: shape mismatch at non-concat axis");
        total_ax += p.dim(ax);
    }
    out[static_cast<size_t>(ax)] = total_ax;

    Index outer = 1, inner = 1;
    for (Index d = 0; d < ax; ++d) outer *= out[static_cast<size_t>(d)];
    for (Index d = ax + 1; d < rank; ++d) inner *= out[static_cast<size_t>(d)];

    std::vector<double> y(static_cast<size_t>(numel_of(out)));
    Index off = 0;
    for (const Tensor& p : parts) {
        const Index pax = p.dim(ax);
        const double* pp = p.data().data();
        for (Index o = 0; o < outer; ++o) {
            std::memcpy(y.data() + (o * total_ax + off) * inner, pp + o * pax * inner,
                        static_cast<size_t>(pax * inner) * sizeof(double));
        }
        off += pax;
    }
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        Tape* pt = common_tape({&p});
        if (pt) {
            if (tape && tape != pt) throw ContractError("concat: operands live on different tapes");
            tape = pt;
        }
    }
    if (!tape) return Tensor::constant(std::move(out), std::move(y));
    tape->store_all(y);

    struct Piece {
        Index node;
        Index ax_len;
        Index ax_off;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    std::vector<Index> parents;
    off = 0;
    for (const Tensor& p : parts) {
        if (p.requires_grad()) {
            pieces->push_back({p.node(), p.dim(ax), off});
            parents.push_back(p.node());
        }
        off += p.dim(ax);
    }
    auto backward = [outer, inner, total_ax, pieces](std::span<const double> up, Tape& t) {
        for (const auto& pc : *pieces) {
            double* g = t.grad_slot(pc.node);
            for (Index o = 0; o < outer; ++o) {
                const double* src = up.data() + (o * total_ax + pc.ax_off) * inner;
                double* dst = g + o * pc.ax_len * inner;
                for (Index j = 0; j < pc.ax_len * inner; ++j) dst[j] += src[j];
            }
        }
    };
    return tape->emit(std::move(out), std::move(y), std::move(parents), std::move(backward));
}

Tensor stack(const std::vector<Tensor>& parts, Index axis) {
    if (parts.empty()) throw ContractError("stack: no parts");
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        Index ax = axis < 0 ? axis + static_cast<Index>(s.size()) + 1 : axis;
        s.insert(s.begin() + static_cast<size_t>(ax), 1);
        expanded.push_back(p.reshape(s));
    }
    return concat(expanded, axis);
}

Tensor slice(const Tensor& a, Index axis, Index start, Index len) {
    const Index rank = a.ndim();
    Index ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) throw ShapeError("slice: axis invalid");
    const Index d = a.dim(ax);
    if (start < 0 || len < 0 || start + len > d)
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for axis of size " + std::to_string(d));
    Index outer = 1, inner = 1;
    for (Index i = 0; i < ax; ++i) outer *= a.dim(i);
    for (Index i = ax + 1; i < rank; ++i) inner *= a.dim(i);
    Shape out = a.shape();
    out[static_cast<size_t>(ax)] = len;
    std::vector<double> y(static_cast<size_t>(outer * len * inner));
    const double* pa = a.data().data();
    for (Index o = 0; o < outer; ++o)
        std::memcpy(y.data() + o * len * inner, pa + (o * d + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(double));
    if (!a.requires_grad()) return Tensor::constant(std::move(out), std::move(y));
    Tape* tape = a.tape();
    const Index anode = a.node();
    auto backward = [outer, inner, d, start, len, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        for (Index o = 0; o < outer; ++o) {
            const double* src = up.data() + o * len * inner;
            double* dst = ga + (o * d + start) * inner;
            for (Index j = 0; j < len * inner; ++j) dst[j] += src[j];
        }
    };
    return tape->emit(std::move(out), std::move(y), {anode}, std::move(backward));
}

Tensor select(const Tensor& a, Index axis, Index i) {
    Index ax = axis < 0 ? axis + a.ndim() : axis;
    Tensor s = slice(a, ax, i, 1);
    Shape out = s.shape();
    out.erase(out.begin() + static_cast<size_t>(ax));
    return s.reshape(out);
}

Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows) {
    if (a.ndim() < 1 || a.ndim() > 2) throw ShapeError("gather_rows: expects [N] or [N,C]");
    const Index m = a.dim(0);
    const Index c = a.ndim() == 2 ? a.dim(1) : 1;
    for (Index r : rows)
        if (r < 0 || r >= m) throw ShapeError("gather_rows: row index out of range");
    const Index n = static_cast<Index>(rows.size());
    std::vector<double> y(static_cast<size_t>(n * c));
    const double* pa = a.data().data();
    for (Index i = 0; i < n; ++i)
        std::memcpy(y.data() + i * c, pa + rows[static_cast<size_t>(i)] * c,
                    static_cast<size_t>(c) * sizeof(double));
    Shape out = a.ndim() == 2 ? Shape{n, c} : Shape{n};
    if (!a.requires_grad()) return Tensor::constant(std::move(out), std::move(y));
    Tape* tape = a.tape();
    const Index anode = a.node();
    auto rows_sh = std::make_shared<const std::vector<Index>>(rows);
    auto backward = [rows_sh, c, anode](std::span<const double> up, Tape& t) {
        double* ga = t.grad_slot(anode);
        for (size_t i = 0; i < rows_sh->size(); ++i) {
            const double* src = up.data() + static_cast<Index>(i) * c;
            double* dst = ga + (*rows_sh)[i] * c;
            for (Index j = 0; j < c; ++j) dst[j] += src[j];
        }
    };
    return tape->emit(std::move(out), std::move(y), {anode}, std::move(backward));
}

Tensor scatter_add_rows(const Tensor& src, const std::vector<Index>& rows, Index out_rows) {
    if (src.ndim() < 1 || src.ndim() > 2) throw ShapeError("scatter_add_rows: expects [N] or [N,C]");
    const Index n = src.dim(0);
    if (static_cast<Index>(rows.size()) != n)
        throw ShapeError("scatter_add_rows: rows size must match src rows");
    const Index c = src.ndim() == 2 ? src.dim(1) : 1;
    for (Index r : rows)
        if (r < 0 || r >= out_rows) throw ShapeError("scatter_add_rows: row index out of range");
    std::vector<double> y(static_cast<size_t>(out_rows * c), 0.0);
    const double* ps = src.data().data();
    for (Index i = 0; i < n; ++i) {
        double* dst = y.data() + rows[static_cast<size_t>(i)] * c;
        for (Index j = 0; j < c; ++j) dst[j] += ps[i * c + j];
    }
    Shape out = src.ndim() == 2 ? Shape{out_rows, c} : Shape{out_rows};
    if (!src.requires_grad()) return Tensor::constant(std::move(out), std::move(y));
    Tape* tape = src.tape();
    const Index snode = src.node();
    auto rows_sh = std::make_shared<const std::vector<Index>>(rows);
    auto backward = [rows_sh, c, snode](std::span<const double> up, Tape& t) {
        double* gs = t.grad_slot(snode);
        for (size_t i = 0; i < rows_sh->size(); ++i) {
            const double* srcg = up.data() + (*rows_sh)[i] * c;
            double* dst = gs + static_cast<Index>(i) * c;
            for (Index j = 0; j < c; ++j) dst[j] += srcg[j];
        }
    };
    return tape->emit(std::move(out), std::move(y), {snode}, std::move(backward));
}

Tensor where_mask(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("where_mask: branch shapes differ");
    const Index n = a.numel();
    Index per = 0;
    if (static_cast<Index>(mask.size()) == n) {
        per = 1;
    } else if (a.ndim() == 2 && static_cast<Index>(mask.size()) == a.dim(0)) {
        per = a.dim(1);  // row-wise mask for [N,C]
    } else {
        throw ShapeError("where_mask: mask length matches neither elements nor rows");
    }
    Tape* tape = common_tape({&a, &b});
    std::vector<double> y(static_cast<size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (Index i = 0; i < n; ++i) y[static_cast<size_t>(i)] = mask[static_cast<size_t>(i / per)] ? pa[i] : pb[i];
    if (!tape) return Tensor::constant(a.shape(), std::move(y));
    tape->store_all(y);
    const Index anode = a.requires_grad() ? a.node() : -1;
    const Index bnode = b.requires_grad() ? b.node() : -1;
    std::vector<Index> parents;
    if (anode >= 0) parents.push_back(anode);
    if (bnode >= 0) parents.push_back(bnode);
    auto mask_sh = std::make_shared<const std::vector<std::uint8_t>>(mask);
    auto backward = [n, per, mask_sh, anode, bnode](std::span<const double> up, Tape& t) {
        double* ga = anode >= 0 ? t.grad_slot(anode) : nullptr;
        double* gb = bnode >= 0 ? t.grad_slot(bnode) : nullptr;
        for (Index i = 0; i < n; ++i) {
            if ((*mask_sh)[static_cast<size_t>(i / per)]) {
                if (ga) ga[i] += up[static_cast<size_t>(i)];
            } else {
                if (gb) gb[i] += up[static_cast<size_t>(i)];
            }
        }
    };
    return tape->emit(a.shape(), std::move(y), std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// grid sampling
// ---------------------------------------------------------------------------

namespace {
struct BilinearCell {
    Index u0, v0;
    double fu, fv;
    bool valid;
};
}  // namespace

GatherResult gather_bilinear(const Tensor& image, const Tensor& coords) {
    if (image.ndim() != 3) throw ShapeError("gather_bilinear: image must be [H,W,C], got " + shape_str(image.shape()));
    if (coords.ndim() != 2 || coords.dim(1) != 2)
        throw ShapeError("gather_bilinear: coords must be [N,2], got " + shape_str(coords.shape()));
    const Index H = image.dim(0), W = image.dim(1), C = image.dim(2), N = coords.dim(0);
    if (H < 2 || W < 2) throw ShapeError("gather_bilinear: image must be at least 2x2");

    const double* pi = image.data().data();
    const double* pc = coords.data().data();
    auto cells = std::make_shared<std::vector<BilinearCell>>(static_cast<size_t>(N));
    std::vector<std::uint8_t> valid(static_cast<size_t>(N), 0);
    std::vector<double> y(static_cast<size_t>(N * C), 0.0);

    for (Index i = 0; i < N; ++i) {
        const double u = pc[2 * i], v = pc[2 * i + 1];
        BilinearCell& cell = (*cells)[static_cast<size_t>(i)];
        cell.valid = u >= 0.0 && u <= static_cast<double>(W - 1) && v >= 0.0 && v <= static_cast<double>(H - 1);
        if (!cell.valid) continue;
        Index u0 = static_cast<Index>(std::floor(u));
        Index v0 = static_cast<Index>(std::floor(v));
        if (u0 > W - 2) u0 = W - 2;  // u == W-1 lands exactly on the last column
        if (v0 > H - 2) v0 = H - 2;
        cell.u0 = u0;
        cell.v0 = v0;
        cell.fu = u - static_cast<double>(u0);
        cell.fv = v - static_cast<double>(v0);
        valid[static_cast<size_t>(i)] = 1;
        const double w00 = (1 - cell.fu) * (1 - cell.fv);
        const double w10 = cell.fu * (1 - cell.fv);
        const double w01 = (1 - cell.fu) * cell.fv;
        const double w11 = cell.fu * cell.fv;
        const double* r0 = pi + (v0 * W + u0) * C;
        const double* r1 = pi + ((v0 + 1) * W + u0) * C;
        for (Index c = 0; c < C; ++c)
            y[static_cast<size_t>(i * C + c)] = w00 * r0[c] + w10 * r0[C + c] + w01 * r1[c] + w11 * r1[C + c];
    }

    Tape* tape = common_tape({&image, &coords});
    if (!tape) return {Tensor::constant({N, C}, std::move(y)), std::move(valid)};
    tape->store_all(y);
    DataPtr idata = image.storage();
    const Index inode = image.requires_grad() ? image.node() : -1;
    const Index cnode = coords.requires_grad() ? coords.node() : -1;
    std::vector<Index> parents;
    if (inode >= 0) parents.push_back(inode);
    if (cnode >= 0) parents.push_back(cnode);
    auto backward = [N, W, C, cells, idata, inode, cnode](std::span<const double> up, Tape& t) {
        double* gi = inode >= 0 ? t.grad_slot(inode) : nullptr;
        double* gc = cnode >= 0 ? t.grad_slot(cnode) : nullptr;
        const double* pi = idata->data();
        for (Index i = 0; i < N; ++i) {
            const BilinearCell& cell = (*cells)[static_cast<size_t>(i)];
            if (!cell.valid) continue;
            const Index base00 = (cell.v0 * W + cell.u0) * C;
            const Index base01 = ((cell.v0 + 1) * W + cell.u0) * C;
            const double w00 = (1 - cell.fu) * (1 - cell.fv);
            const double w10 = cell.fu * (1 - cell.fv);
            const double w01 = (1 - cell.fu) * cell.fv;
            const double w11 = cell.fu * cell.fv;
            double du = 0.0, dv = 0.0;
            for (Index c = 0; c < C; ++c) {
                const double g = up[static_cast<size_t>(i * C + c)];
                if (gi) {
                    gi[base00 + c] += g * w00;
                    gi[base00 + C + c] += g * w10;
                    gi[base01 + c] += g * w01;
                    gi[base01 + C + c] += g * w11;
                }
                if (gc) {
                    const double i00 = pi[base00 + c], i10 = pi[base00 + C + c];
                    const double i01 = pi[base01 + c], i11 = pi[base01 + C + c];
                    du += g * ((1 - cell.fv) * (i10 - i00) + cell.fv * (i11 - i01));
                    dv += g * ((1 - cell.fu) * (i01 - i00) + cell.fu * (i11 - i10));
                }
            }
            if (gc) {
                gc[2 * i] += du;
                gc[2 * i + 1] += dv;
            }
        }
    };
    Tensor values = tape->emit({N, C}, std::move(y), std::move(parents), std::move(backward));
    return {std::move(values), std::move(valid)};
}

namespace {
struct TrilinearCell {
    Index x0, y0, z0;
    double fx, fy, fz;
    bool valid;
};
}  // namespace

GatherResult gather_trilinear(const Tensor& volume, const Tensor& coords) {
    if (volume.ndim() != 3)
        throw ShapeError("gather_trilinear: volume must be [nx,ny,nz], got " + shape_str(volume.shape()));
    if (coords.ndim() != 2 || coords.dim(1) != 3)
        throw ShapeError("gather_trilinear: coords must be [N,3], got " + shape_str(coords.shape()));
    const Index nx = volume.dim(0), ny = volume.dim(1), nz = volume.dim(2), N = coords.dim(0);
    if (nx < 2 || ny < 2 || nz < 2) throw ShapeError("gather_trilinear: volume must be at least 2^3");

    const double* pv = volume.data().data();
    const double* pc = coords.data().data();
    auto cells = std::make_shared<std::vector<TrilinearCell>>(static_cast<size_t>(N));
    std::vector<std::uint8_t> valid(static_cast<size_t>(N), 0);
    std::vector<double> y(static_cast<size_t>(N), 0.0);

    auto vox = [&](Index x, Index yk, Index z) { return (x * ny + yk) * nz + z; };

    for (Index i = 0; i < N; ++i) {
        const double x = pc[3 * i], yc = pc[3 * i + 1], z = pc[3 * i + 2];
        TrilinearCell& cell = (*cells)[static_cast<size_t>(i)];
        cell.valid = x >= 0.0 && x <= static_cast<double>(nx - 1) && yc >= 0.0 &&
                     yc <= static_cast<double>(ny - 1) && z >= 0.0 && z <= static_cast<double>(nz - 1);
        if (!cell.valid) continue;
        Index x0 = std::min(static_cast<Index>(std::floor(x)), nx - 2);
        Index y0 = std::min(static_cast<Index>(std::floor(yc)), ny - 2);
        Index z0 = std::min(static_cast<Index>(std::floor(z)), nz - 2);
        cell.x0 = x0;
        cell.y0 = y0;
        cell.z0 = z0;
        cell.fx = x - static_cast<double>(x0);
        cell.fy = yc - static_cast<double>(y0);
        cell.fz = z - static_cast<double>(z0);
        valid[static_cast<size_t>(i)] = 1;
        double acc = 0.0;
        for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                    const double w = (dx ? cell.fx : 1 - cell.fx) * (dy ? cell.fy : 1 - cell.fy) *
                                     (dz ? cell.fz : 1 - cell.fz);
                    acc += w * pv[vox(x0 + dx, y0 + dy, z0 + dz)];
                }
        y[static_cast<size_t>(i)] = acc;
    }

    Tape* tape = common_tape({&volume, &coords});
    if (!tape) return {Tensor::constant({N}, std::move(y)), std::move(valid)};
    tape->store_all(y);
    DataPtr vdata = volume.storage();
    const Index vnode = volume.requires_grad() ? volume.node() : -1;
    const Index cnode = coords.requires_grad() ? coords.node() : -1;
    std::vector<Index> parents;
    if (vnode >= 0) parents.push_back(vnode);
    if (cnode >= 0) parents.push_back(cnode);
    auto backward = [N, ny, nz, cells, vdata, vnode, cnode](std::span<const double> up, Tape& t) {
        double* gv = vnode >= 0 ? t.grad_slot(vnode) : nullptr;
        double* gc = cnode >= 0 ? t.grad_slot(cnode) : nullptr;
        const double* pv = vdata->data();
        auto vox = [&](Index x, Index yk, Index z) { return (x * ny + yk) * nz + z; };
        for (Index i = 0; i < N; ++i) {
            const TrilinearCell& cell = (*cells)[static_cast<size_t>(i)];
            if (!cell.valid) continue;
            const double g = up[static_cast<size_t>(i)];
            double dx_acc = 0.0, dy_acc = 0.0, dz_acc = 0.0;
            for (int dx = 0; dx < 2; ++dx)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dz = 0; dz < 2; ++dz) {
                        const Index j = vox(cell.x0 + dx, cell.y0 + dy, cell.z0 + dz);
                        const double wx = dx ? cell.fx : 1 - cell.fx;
                        const double wy = dy ? cell.fy : 1 - cell.fy;
                        const double wz = dz ? cell.fz : 1 - cell.fz;
                        if (gv) gv[j] += g * wx * wy * wz;
                        if (gc) {
                            const double val = pv[j];
                            dx_acc += (dx ? 1.0 : -1.0) * wy * wz * val;
                            dy_acc += (dy ? 1.0 : -1.0) * wx * wz * val;
                            dz_acc += (dz ? 1.0 : -1.0) * wx * wy * val;
                        }
                    }
            if (gc) {
                gc[3 * i] += g * dx_acc;
                gc[3 * i + 1] += g * dy_acc;
                gc[3 * i + 2] += g * dz_acc;
            }
        }
    };
    Tensor values = tape->emit({N}, std::move(y), std::move(parents), std::move(backward));
    return {std::move(values), std::move(valid)};
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

std::vector<Tensor> checkpoint(const StageFn& fn, const std::vector<Tensor>& inputs) {
    Tape* tape = nullptr;
    for (const Tensor& t : inputs) {
        Tape* pt = common_tape({&t});
        if (pt) {
            if (tape && tape != pt) throw ContractError("checkpoint: inputs live on different tapes");
            tape = pt;
        }
    }
    std::vector<Tensor> detached;
    detached.reserve(inputs.size());
    for (const Tensor& t : inputs) detached.push_back(t.detach());
    std::vector<Tensor> outs = fn(detached);
    if (!tape) return outs;

    // One fused node carries all flattened outputs; slices re-expose them.
    std::vector<Shape> out_shapes;
    std::vector<Index> out_sizes;
    std::vector<double> flat;
    for (const Tensor& o : outs) {
        out_shapes.push_back(o.shape());
        out_sizes.push_back(o.numel());
        auto d = o.data();
        flat.insert(flat.end(), d.begin(), d.end());
    }
    const Index total = static_cast<Index>(flat.size());

    auto in_values = std::make_shared<std::vector<std::vector<double>>>();
    auto in_shapes = std::make_shared<std::vector<Shape>>();
    auto in_nodes = std::make_shared<std::vector<Index>>();
    std::vector<Index> parents;
    for (const Tensor& t : inputs) {
        in_values->push_back(t.to_vector());
        in_shapes->push_back(t.shape());
        const Index node = t.requires_grad() ? t.node() : -1;
        in_nodes->push_back(node);
        if (node >= 0) parents.push_back(node);
    }
    auto sizes_sh = std::make_shared<const std::vector<Index>>(out_sizes);
    auto shapes_sh = std::make_shared<const std::vector<Shape>>(out_shapes);
    DType dtype = tape->dtype();
    auto backward = [fn, in_values, in_shapes, in_nodes, sizes_sh, shapes_sh, dtype](
                        std::span<const double> up, Tape& t) {
        Tape sub(dtype);
        std::vector<Tensor> leaves;
        for (size_t i = 0; i < in_values->size(); ++i)
            leaves.push_back(sub.leaf((*in_shapes)[i], (*in_values)[i]));
        std::vector<Tensor> outs2 = fn(leaves);
        if (outs2.size() != sizes_sh->size())
            throw ContractError("checkpoint: stage produced a different number of outputs on replay");
        // scalar <upstream, outputs> pairing drives the vector-Jacobian product
        Tensor total;
        Index off = 0;
        for (size_t k = 0; k < outs2.size(); ++k) {
            const Index sz = (*sizes_sh)[k];
            std::vector<double> seg(up.begin() + off, up.begin() + off + sz);
            Tensor upc = Tensor::constant((*shapes_sh)[k], std::move(seg));
            Tensor term = sum(mul(outs2[k], upc));
            total = total.defined() ? add(total, term) : term;
            off += sz;
        }
        sub.backward(total);
        for (size_t i = 0; i < leaves.size(); ++i) {
            const Index node = (*in_nodes)[i];
            if (node < 0) continue;
            Tensor g = leaves[i].grad();
            if (!g.defined()) continue;
            double* slot = t.grad_slot(node);
            auto gd = g.data();
            for (size_t j = 0; j < gd.size(); ++j) slot[j] += gd[j];
        }
    };
    Tensor fused = tape->emit({total}, std::move(flat), std::move(parents), std::move(backward));

    std::vector<Tensor> results;
    Index off = 0;
    for (size_t k = 0; k < out_shapes.size(); ++k) {
        Tensor part = slice(fused, 0, off, out_sizes[k]);
        results.push_back(part.reshape(out_shapes[k]));
        off += out_sizes[k];
    }
    return results;
}

}  // namespace diffslam
