#pragma once

#include <cstdint>
#include <vector>

#include "diffslam/tensor.hpp"

namespace diffslam {

// ---------------------------------------------------------------------------
// Elementwise primitives. Binary ops broadcast over trailing dimensions.
// Every op records its local gradient rule when an input lives on a tape.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor acos(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor pow(const Tensor& a, double e);
Tensor pow(const Tensor& a, const Tensor& b);

// Smooth saturation in (lo, hi): generalized logistic with unit slope at the
// midpoint for steepness = 1. Strictly monotone, derivative never zero.
Tensor clamp_smooth(const Tensor& x, double lo, double hi, double steepness = 1.0);

// Logistic blend of the two branches; exact to double precision when
// |a-b| >> 1/k, and (a+b)/2 at the crossing.
Tensor smooth_max(const Tensor& a, const Tensor& b, double k = 50.0);
Tensor smooth_min(const Tensor& a, const Tensor& b, double k = 50.0);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<Index>& axes, bool keepdims = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<Index>& axes, bool keepdims = false);

// Softmax along one axis; softmin(a) == softmax(-a). Combine with mul + sum
// for softmax-weighted reductions.
Tensor softmax(const Tensor& a, Index axis);
Tensor softmin(const Tensor& a, Index axis);

Tensor dot(const Tensor& a, const Tensor& b);  // sum(a * b)

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D only

// Solves A x = b for square A ([k,k]) and b ([k] or [k,n]) as one tape node;
// the backward rule solves the adjoint system. Adds a 1e-10 ridge and reports
// through `warned` (when given) if A is numerically singular.
Tensor linear_solve(const Tensor& A, const Tensor& b, bool* warned = nullptr);

// ---------------------------------------------------------------------------
// Structure: views, concatenation, indexed access
// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, Index axis);
Tensor stack(const std::vector<Tensor>& parts, Index axis = 0);
Tensor slice(const Tensor& a, Index axis, Index start, Index len);
Tensor select(const Tensor& a, Index axis, Index i);  // slice of length 1, squeezed

// Row gather/scatter for [N] or [N,C] tensors; indices are forward-only data
// (no gradient through index selection, full gradient through values).
Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows);
Tensor scatter_add_rows(const Tensor& src, const std::vector<Index>& rows, Index out_rows);

// Elementwise select by a constant mask (1 -> a, 0 -> b). Gradient flows only
// into the branch that produced each element; the mask itself has none.
Tensor where_mask(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Grid sampling
// ---------------------------------------------------------------------------

struct GatherResult {
    Tensor values;                    // [N,C] (bilinear) or [N] (trilinear)
    std::vector<std::uint8_t> valid;  // out-of-bounds rows are 0 and zero-valued
};

// Samples image [H,W,C] at continuous pixel coords [N,2] = (u,v), u along
// width. Gradient flows to both the image values and the coordinates.
// Out-of-bounds rows are flagged invalid, never clamped.
GatherResult gather_bilinear(const Tensor& image, const Tensor& coords);

// Samples volume [nx,ny,nz] at continuous voxel coords [N,3].
GatherResult gather_trilinear(const Tensor& volume, const Tensor& coords);

// ---------------------------------------------------------------------------
// Checkpointing: runs `fn` without recording its interior, and re-runs it on
// a scratch tape during backward to recover gradients. Trades compute for
// tape memory on long pipelines.
// ---------------------------------------------------------------------------

using StageFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;
std::vector<Tensor> checkpoint(const StageFn& fn, const std::vector<Tensor>& inputs);

}  // namespace diffslam
