#include "voxelsr/autodiff/tensor.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace voxelsr::ad {

namespace {
thread_local bool t_grad_enabled = true;
}

Shape::Shape(std::initializer_list<std::int64_t> dims) : Shape(std::vector<std::int64_t>(dims)) {}

Shape::Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {
    constexpr auto limit = std::numeric_limits<std::int64_t>::max();
    numel_ = 1;
    for (auto d : dims_) {
        if (d < 1) {
            throw ShapeError("dimension must be >= 1 in shape " + str());
        }
        if (numel_ > limit / d) {
            throw ShapeError("element count overflows in shape " + str());
        }
        numel_ *= d;
    }
}

std::int64_t Shape::operator[](std::size_t axis) const {
    if (axis >= dims_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + str());
    }
    return dims_[axis];
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ')';
    return os.str();
}

bool grad_enabled() noexcept { return t_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) noexcept : previous_(t_grad_enabled) { t_grad_enabled = enabled; }

GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

template <typename T>
bool Node<T>::needs_grad(std::size_t i) const {
    return i < inputs_.size() && inputs_[i].requires_grad();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
    }
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::make_shared<const std::vector<T>>(std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
    return full(shape, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::ones(const Shape& shape) {
    return full(shape, T(1));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> values, std::shared_ptr<const Node<T>> node) {
    Tensor out(std::move(shape), std::move(values));
    if (node && grad_enabled()) {
        const auto& ins = node->inputs();
        const bool any = std::any_of(ins.begin(), ins.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            out.impl_->requires_grad = true;
            out.impl_->grad_fn = std::move(node);
        }
    }
    return out;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    if (!impl_) throw GraphError("use of an undefined tensor");
    return impl_->shape;
}

template <typename T>
std::span<const T> Tensor<T>::values() const& {
    if (!impl_) throw GraphError("use of an undefined tensor");
    return {impl_->data->data(), impl_->data->size()};
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a single-element tensor, got " + shape().str());
    }
    return values()[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
    if (!impl_) throw GraphError("use of an undefined tensor");
    if (impl_->grad_fn) {
        throw GraphError("requires_grad can only be set on leaf tensors");
    }
    impl_->requires_grad = flag;
    return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    Tensor out;
    out.impl_ = std::make_shared<Impl>();
    out.impl_->shape = shape();
    out.impl_->data = impl_->data;
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::view_as(const Shape& new_shape) const {
    if (new_shape.numel() != numel()) {
        throw ShapeError("cannot view " + shape().str() + " as " + new_shape.str());
    }
    Tensor out = detach();
    out.impl_->shape = new_shape;
    return out;
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
    auto v = values();
    return {v.begin(), v.end()};
}

template class Node<float>;
template class Node<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace voxelsr::ad
