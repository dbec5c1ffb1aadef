#include "diffslam/tensor.hpp"

#include <numeric>
#include <sstream>

namespace diffslam {

Index numel_of(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != static_cast<Index>(data.size()))
        throw ShapeError("constant: shape " + shape_str(shape) + " expects " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(data.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
    return t;
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> d(static_cast<size_t>(numel_of(shape)), 0.0);
    return constant(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double v) {
    std::vector<double> d(static_cast<size_t>(numel_of(shape)), v);
    return constant(std::move(shape), std::move(d));
}

Index Tensor::numel() const { return data_ ? static_cast<Index>(data_->size()) : 0; }

Index Tensor::dim(Index i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw ShapeError("dim index out of range for " + shape_str(shape_));
    return shape_[static_cast<size_t>(i)];
}

std::span<const double> Tensor::data() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value(): tensor has " + std::to_string(numel()) + " elements, expected 1");
    return (*data_)[0];
}

double Tensor::at(Index flat) const {
    if (flat < 0 || flat >= numel()) throw ShapeError("flat index out of range");
    return (*data_)[static_cast<size_t>(flat)];
}

double Tensor::at(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != ndim())
        throw ShapeError("index rank mismatch for shape " + shape_str(shape_));
    Index flat = 0;
    size_t k = 0;
    for (Index i : idx) {
        Index d = shape_[k++];
        if (i < 0 || i >= d) throw ShapeError("index out of range");
        flat = flat * d + i;
    }
    return (*data_)[static_cast<size_t>(flat)];
}

Tensor Tensor::grad() const {
    if (!tape_) return {};
    const std::vector<double>* g = tape_->grad_data(node_);
    if (!g) return {};
    return Tensor::constant(shape_, *g);
}

bool Tensor::has_grad() const { return tape_ && tape_->grad_data(node_) != nullptr; }

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

std::vector<double> Tensor::to_vector() const {
    if (!data_) return {};
    return *data_;
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (numel_of(new_shape) != numel())
        throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(new_shape));
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

Tensor Tape::leaf(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != static_cast<Index>(data.size()))
        throw ShapeError("leaf: shape " + shape_str(shape) + " expects " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(data.size()));
    store_all(data);
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
    t.tape_ = this;
    t.node_ = static_cast<Index>(nodes_.size());
    nodes_.push_back(Node{{}, {}, t.numel()});
    grads_.emplace_back();
    return t;
}

Tensor Tape::leaf(const Tensor& values) { return leaf(values.shape(), values.to_vector()); }

Tensor Tape::emit(Shape shape, std::vector<double> data, std::vector<Index> parents,
                  BackwardFn backward) {
    store_all(data);
    return emit_shared(std::move(shape), std::make_shared<const std::vector<double>>(std::move(data)),
                       std::move(parents), std::move(backward));
}

Tensor Tape::emit_shared(Shape shape, std::shared_ptr<const std::vector<double>> data,
                         std::vector<Index> parents, BackwardFn backward) {
    for (Index p : parents) {
        if (p < 0 || p >= static_cast<Index>(nodes_.size()))
            throw ContractError("emit: parent node id out of range (tape must stay acyclic)");
    }
    if (numel_of(shape) != static_cast<Index>(data->size()))
        throw ShapeError("emit: shape/data size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.tape_ = this;
    t.node_ = static_cast<Index>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), std::move(backward), t.numel()});
    grads_.emplace_back();
    return t;
}

double* Tape::grad_slot(Index node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0);
    return g.data();
}

const std::vector<double>* Tape::grad_data(Index node) const {
    if (node < 0 || node >= static_cast<Index>(grads_.size())) return nullptr;
    const auto& g = grads_[static_cast<size_t>(node)];
    return g.empty() ? nullptr : &g;
}

void Tape::store_all(std::vector<double>& v) const {
    if (dtype_ != DType::f32) return;
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void Tape::backward(const Tensor& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss does not live on this tape");
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    grad_slot(loss.node())[0] += 1.0;
    for (Index i = loss.node(); i >= 0; --i) {
        auto& g = grads_[static_cast<size_t>(i)];
        if (g.empty()) continue;
        auto& n = nodes_[static_cast<size_t>(i)];
        if (n.backward) {
            n.backward(std::span<const double>(g.data(), g.size()), *this);
            // Interior gradients are scratch: releasing them here keeps a
            // second backward pass from re-propagating stale values and
            // bounds memory on long pipelines. Leaves keep accumulating.
            g.clear();
            g.shrink_to_fit();
        }
    }
}

void Tape::zero_grad() {
    for (auto& g : grads_) g.clear();
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t || !t->requires_grad()) continue;
        if (!tape) {
            tape = t->tape();
        } else if (tape != t->tape()) {
            throw ContractError("operands live on different tapes");
        }
    }
    return tape;
}

}  // namespace diffslam
