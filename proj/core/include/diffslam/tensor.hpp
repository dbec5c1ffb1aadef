#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffslam/error.hpp"

namespace diffslam {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage precision of a tape. Values are always held as doubles; in f32 mode
// every leaf and every op result is rounded through IEEE single precision, so
// the runtime behaves like a float32 engine while the API stays uniform.
enum class DType { f64, f32 };

class Tape;

// Dense multi-dimensional array. A Tensor is either a constant (no tape) or a
// node on exactly one Tape. Data is immutable after creation and shared, so
// copies are cheap and tensors are safe to read concurrently.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    Index ndim() const { return static_cast<Index>(shape_.size()); }
    Index numel() const;
    Index dim(Index i) const;

    std::span<const double> data() const;
    // Shared immutable storage; ops capture this in backward closures.
    std::shared_ptr<const std::vector<double>> storage() const { return data_; }
    // Scalar convenience accessor; requires numel() == 1.
    double value() const;
    double at(Index flat) const;
    double at(std::initializer_list<Index> idx) const;

    bool requires_grad() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    Index node() const { return node_; }

    // Accumulated gradient after Tape::backward. Undefined tensor if no
    // gradient reached this node.
    Tensor grad() const;
    bool has_grad() const;

    // Same data, detached from any tape.
    Tensor detach() const;
    std::vector<double> to_vector() const;

    // View with a new shape (same element count, shared data and tape node).
    Tensor reshape(Shape new_shape) const;

private:
    friend class Tape;
    std::shared_ptr<const std::vector<double>> data_;
    Shape shape_;
    Tape* tape_ = nullptr;
    Index node_ = -1;
};

// Append-only record of differentiable operations. Nodes only reference
// earlier nodes, so replaying the records in reverse visits each node exactly
// once in a valid topological order. One tape is owned by one logical thread.
class Tape {
public:
    explicit Tape(DType dtype = DType::f64) : dtype_(dtype) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    DType dtype() const { return dtype_; }

    // Differentiable input. Gradients accumulate here during backward.
    Tensor leaf(Shape shape, std::vector<double> data);
    Tensor leaf(const Tensor& values);

    Index size() const { return static_cast<Index>(nodes_.size()); }

    // Reverse sweep from a scalar loss. Gradients accumulate additively
    // across calls; use zero_grad() between independent backward passes.
    void backward(const Tensor& loss);
    void zero_grad();

    // Releases all nodes and gradients. Tensors created on this tape stay
    // readable (they share their data) but lose gradient tracking.
    void clear();

    using BackwardFn = std::function<void(std::span<const double> upstream, Tape& tape)>;

    // Records one op. `parents` lists the tape nodes the backward fn will
    // accumulate into; each must be an existing node id.
    Tensor emit(Shape shape, std::vector<double> data, std::vector<Index> parents,
                BackwardFn backward);

    // Same, for data already rounded to tape precision (see store_all) that
    // the backward closure wants to share.
    Tensor emit_shared(Shape shape, std::shared_ptr<const std::vector<double>> data,
                       std::vector<Index> parents, BackwardFn backward);

    // Accumulation buffer for a node, allocated on first use.
    double* grad_slot(Index node);
    const std::vector<double>* grad_data(Index node) const;

    // Rounds a value to the tape's storage precision.
    double store(double v) const {
        return dtype_ == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
    }
    void store_all(std::vector<double>& v) const;

private:
    struct Node {
        std::vector<Index> parents;
        BackwardFn backward;  // empty for leaves
        Index numel = 0;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    DType dtype_;
};

// The unique tape among the inputs, or nullptr if all are constants.
// Throws ContractError if two distinct tapes are mixed.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

}  // namespace diffslam
