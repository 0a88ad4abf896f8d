#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hmr/alloc_stats.hpp"
#include "hmr/errors.hpp"

namespace hmr {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

// Flat zero-initialized buffer hooked into the allocation counters.
template <class T>
class Buffer {
public:
    explicit Buffer(std::size_t n) : n_(n) {
        alloc_stats::note_alloc(n_ * sizeof(T));
        p_ = std::make_unique<T[]>(n_);  // value-initialized
    }
    ~Buffer() { alloc_stats::note_free(n_ * sizeof(T)); }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;

    std::span<T> span() { return {p_.get(), n_}; }
    std::span<const T> span() const { return {p_.get(), n_}; }
    std::size_t size() const { return n_; }

private:
    std::unique_ptr<T[]> p_;
    std::size_t n_;
};

}  // namespace detail

// Integer index carrier (item ids, attribute ids, targets).
struct IntTensor {
    Shape shape;
    std::vector<std::int64_t> data;

    IntTensor() = default;
    IntTensor(Shape s, std::vector<std::int64_t> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("IntTensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    static IntTensor zeros(Shape s) {
        std::size_t n = shape_numel(s);
        return IntTensor(std::move(s), std::vector<std::int64_t>(n, 0));
    }
    std::size_t size() const { return data.size(); }
    std::int64_t& at(std::size_t i) { return data[i]; }
    std::int64_t at(std::size_t i) const { return data[i]; }
};

// Dense row-major real tensor. Copies are shallow: handles share the
// underlying data and gradient buffers, which are never mutated by
// forward operations once written (each op writes a fresh output).
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<detail::Buffer<T>>(shape_numel(t.shape_));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.data()) v = value;
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, std::initializer_list<T> values) {
        return from(std::move(shape), std::vector<T>(values));
    }

    static Tensor from(Shape shape, const std::vector<T>& values) {
        Tensor t = zeros(std::move(shape));
        if (t.size() != values.size())
            throw ShapeError("Tensor::from: shape " + shape_str(t.shape_) + " does not match " +
                             std::to_string(values.size()) + " values");
        std::copy(values.begin(), values.end(), t.data().begin());
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::span<T> data() { return data_->span(); }
    std::span<const T> data() const { return data_->span(); }

    bool requires_grad() const { return requires_grad_; }

    Tensor& set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on && !grad_) grad_ = std::make_shared<detail::Buffer<T>>(size());
        return *this;
    }

    std::span<T> grad() {
        if (!grad_) throw ContractError("Tensor: gradient accessed but requires_grad is off");
        return grad_->span();
    }
    std::span<const T> grad() const {
        if (!grad_) throw ContractError("Tensor: gradient accessed but requires_grad is off");
        return grad_->span();
    }

    void zero_grad() {
        if (grad_)
            for (auto& g : grad_->span()) g = T(0);
    }

    // View with a different shape over the same data (and gradient)
    // buffers; total element count must match.
    Tensor reshape(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
        Tensor t(*this);
        t.shape_ = std::move(shape);
        return t;
    }

    T item() const {
        if (size() != 1) throw ContractError("Tensor::item: tensor of shape " + shape_str(shape_) + " is not scalar");
        return data()[0];
    }

    // Identity of the underlying buffer; used by tests for view checks.
    const void* data_id() const { return data_.get(); }

private:
    Shape shape_;
    std::shared_ptr<detail::Buffer<T>> data_;
    std::shared_ptr<detail::Buffer<T>> grad_;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Operations append nodes in execution order, which is
// a topological order by construction; `backward` replays them once in
// reverse. Operation outputs (intermediates) are tracked and their
// gradient buffers cleared at the start of each traversal, so leaf
// gradients add linearly across repeated backward calls and a zero_grad
// on the leaves restores the previous result exactly.
template <class T>
class Tape {
public:
    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back({op, std::move(backward)});
    }

    // Marks `t` as an operation output owned by this tape.
    void track_output(const Tensor<T>& t) { outputs_.push_back(t); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    void reset_output_grads() {
        for (auto& t : outputs_) t.zero_grad();
    }

    void clear() {
        nodes_.clear();
        outputs_.clear();
    }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        const char* op;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> outputs_;
};

// Marks an op result as differentiable and owned by the tape.
template <class T>
void mark_output(Tape<T>* tape, Tensor<T>& out) {
    out.set_requires_grad(true);
    tape->track_output(out);
}

// Seeds d(loss)/d(loss) = 1 and propagates through the tape.
template <class T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw TrainingError("backward: loss is not finite");
    if (!loss.requires_grad())
        throw ContractError("backward: loss does not require grad (no tape attached)");
    tape.reset_output_grads();
    loss.grad()[0] += T(1);
    tape.run_backward();
}

}  // namespace hmr
