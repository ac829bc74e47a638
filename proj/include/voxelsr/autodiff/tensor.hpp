#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace voxelsr::ad {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Dimensions of a dense row-major array. Model tensors use (N, C, D, H, W).
// The rank-0 shape is a scalar with one element.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims);
    explicit Shape(std::vector<std::int64_t> dims);

    [[nodiscard]] std::size_t rank() const noexcept { return dims_.size(); }
    [[nodiscard]] std::int64_t operator[](std::size_t axis) const;
    [[nodiscard]] std::int64_t numel() const noexcept { return numel_; }
    [[nodiscard]] const std::vector<std::int64_t>& dims() const noexcept { return dims_; }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Shape& a, const Shape& b) { return a.dims_ == b.dims_; }

private:
    std::vector<std::int64_t> dims_;
    std::int64_t numel_ = 1;
};

// Graph recording is thread-local. Ops only attach a backward node when
// recording is enabled and at least one input requires a gradient.
[[nodiscard]] bool grad_enabled() noexcept;

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) noexcept;
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

class NoGradGuard : public GradModeGuard {
public:
    NoGradGuard() noexcept : GradModeGuard(false) {}
};

template <typename T>
class Tensor;

// A recorded operation. Backward rules are written in terms of differentiable
// tensor ops, so running them with recording enabled yields a graph for the
// gradient itself (needed for gradient-norm penalties).
template <typename T>
class Node {
public:
    explicit Node(std::vector<Tensor<T>> inputs) : inputs_(std::move(inputs)) {}
    virtual ~Node() = default;

    [[nodiscard]] virtual std::string_view name() const = 0;
    // One entry per input; undefined tensors for inputs that need no gradient.
    [[nodiscard]] virtual std::vector<Tensor<T>> backward(const Tensor<T>& grad_output) const = 0;

    [[nodiscard]] const std::vector<Tensor<T>>& inputs() const noexcept { return inputs_; }

protected:
    [[nodiscard]] bool needs_grad(std::size_t i) const;

    std::vector<Tensor<T>> inputs_;
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    // Leaf tensor. Throws ShapeError when values.size() != shape.numel().
    Tensor(Shape shape, std::vector<T> values);

    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, T value);
    static Tensor scalar(T value);

    // Result of an op: records `node` when recording is on and some input
    // of the node requires a gradient.
    static Tensor from_op(Shape shape, std::vector<T> values, std::shared_ptr<const Node<T>> node);

    [[nodiscard]] bool defined() const noexcept { return static_cast<bool>(impl_); }
    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] std::int64_t numel() const { return shape().numel(); }
    [[nodiscard]] std::span<const T> values() const&;
    // A span into a temporary would dangle.
    std::span<const T> values() const&& = delete;
    [[nodiscard]] T item() const;
    [[nodiscard]] T operator[](std::int64_t flat_index) const { return values()[static_cast<std::size_t>(flat_index)]; }

    [[nodiscard]] bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
    [[nodiscard]] bool is_leaf() const noexcept { return impl_ && !impl_->grad_fn; }
    // Leaves only.
    Tensor& set_requires_grad(bool flag = true);
    [[nodiscard]] const Node<T>* grad_fn() const noexcept { return impl_ ? impl_->grad_fn.get() : nullptr; }
    [[nodiscard]] const void* id() const noexcept { return impl_.get(); }
    // Non-owning handle on the producing node; expires once the graph is released.
    [[nodiscard]] std::weak_ptr<const Node<T>> grad_fn_handle() const {
        return impl_ ? std::weak_ptr<const Node<T>>(impl_->grad_fn) : std::weak_ptr<const Node<T>>();
    }

    // New leaf sharing the value buffer, detached from any graph.
    [[nodiscard]] Tensor detach() const;
    // Same values viewed with a different shape (graph-free; see ad::reshape for the differentiable one).
    [[nodiscard]] Tensor view_as(const Shape& shape) const;
    [[nodiscard]] std::vector<T> to_vector() const;

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const;

private:
    struct Impl {
        Shape shape;
        std::shared_ptr<const std::vector<T>> data;
        bool requires_grad = false;
        std::shared_ptr<const Node<T>> grad_fn;
    };
    std::shared_ptr<Impl> impl_;
};

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
    auto v = values();
    std::vector<U> out(v.begin(), v.end());
    return Tensor<U>(shape(), std::move(out));
}

extern template class Node<float>;
extern template class Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace voxelsr::ad
