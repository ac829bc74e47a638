#include "voxelsr/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "conv_kernels.hpp"
#include "gemm.hpp"

namespace voxelsr::ad {

namespace {

template <typename T>
using Grads = std::vector<Tensor<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

template <typename T, typename F>
std::vector<T> map_values(const Tensor<T>& x, F f) {
    auto v = x.values();
    std::vector<T> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), f);
    return out;
}

template <typename T, typename F>
std::vector<T> zip_values(const Tensor<T>& a, const Tensor<T>& b, F f) {
    auto va = a.values();
    auto vb = b.values();
    std::vector<T> out(va.size());
    std::transform(va.begin(), va.end(), vb.begin(), out.begin(), f);
    return out;
}

// Graph-free tensor computed from x's values (masks and similar constants).
template <typename T, typename F>
Tensor<T> constant_like(const Tensor<T>& x, F f) {
    return Tensor<T>(x.shape(), map_values(x, f));
}

template <typename NodeT, typename T, typename... Args>
std::shared_ptr<const Node<T>> node(std::vector<Tensor<T>> inputs, Args&&... args) {
    if (!grad_enabled()) return nullptr;
    return std::make_shared<const NodeT>(std::move(inputs), std::forward<Args>(args)...);
}

// ----------------------------------------------------------------- elementwise

template <typename T>
struct AddNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "add"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {this->needs_grad(0) ? g : Tensor<T>{}, this->needs_grad(1) ? g : Tensor<T>{}};
    }
};

template <typename T>
struct SubNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "sub"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {this->needs_grad(0) ? g : Tensor<T>{}, this->needs_grad(1) ? neg(g) : Tensor<T>{}};
    }
};

template <typename T>
struct MulNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "mul"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const auto& a = this->inputs_[0];
        const auto& b = this->inputs_[1];
        return {this->needs_grad(0) ? mul(g, b) : Tensor<T>{}, this->needs_grad(1) ? mul(g, a) : Tensor<T>{}};
    }
};

template <typename T>
struct NegNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "neg"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {neg(g)}; }
};

template <typename T>
struct AbsNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "abs"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        auto sign = constant_like(this->inputs_[0], [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
        return {mul(g, sign)};
    }
};

template <typename T>
struct SquareNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "square"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {mul(g, mul_scalar(this->inputs_[0], 2.0))}; }
};

// f(y) = 0.5 / y for y > 0, else 0. The derivative of sqrt expressed through
// its output, with the value at 0 pinned to 0.
template <typename T>
Tensor<T> half_inverse(const Tensor<T>& y);

template <typename T>
struct HalfInverseNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "half_inverse"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        // f' = -0.5 / y^2 = -2 f^2
        return {mul(g, mul_scalar(square(half_inverse(this->inputs_[0])), -2.0))};
    }
};

template <typename T>
Tensor<T> half_inverse(const Tensor<T>& y) {
    return Tensor<T>::from_op(y.shape(), map_values(y, [](T v) { return v > T(0) ? T(0.5) / v : T(0); }),
                              node<HalfInverseNode<T>>(std::vector<Tensor<T>>{y}));
}

template <typename T>
struct SqrtNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "sqrt"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {mul(g, half_inverse(sqrt(this->inputs_[0])))};
    }
};

template <typename T>
struct ReciprocalNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "reciprocal"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {mul(g, neg(square(reciprocal(this->inputs_[0]))))};
    }
};

template <typename T>
struct AddScalarNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "add_scalar"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {g}; }
};

template <typename T>
struct MulScalarNode final : Node<T> {
    MulScalarNode(std::vector<Tensor<T>> in, double c) : Node<T>(std::move(in)), c_(c) {}
    std::string_view name() const override { return "mul_scalar"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {mul_scalar(g, c_)}; }
    double c_;
};

// ----------------------------------------------------------------- activations

template <typename T>
struct ReluNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "relu"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {mul(g, constant_like(this->inputs_[0], [](T v) { return v > T(0) ? T(1) : T(0); }))};
    }
};

template <typename T>
struct LeakyReluNode final : Node<T> {
    LeakyReluNode(std::vector<Tensor<T>> in, double alpha) : Node<T>(std::move(in)), alpha_(alpha) {}
    std::string_view name() const override { return "leaky_relu"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const T a = static_cast<T>(alpha_);
        return {mul(g, constant_like(this->inputs_[0], [a](T v) { return v > T(0) ? T(1) : a; }))};
    }
    double alpha_;
};

// d/dx elu(x): 1 for x > 0, exp(x) otherwise. Differentiable once more, which
// is as deep as the gradient penalty needs.
template <typename T>
struct EluGradNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "elu_grad"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {mul(g, constant_like(this->inputs_[0], [](T v) { return v > T(0) ? T(0) : std::exp(v); }))};
    }
};

template <typename T>
Tensor<T> elu_grad(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return v > T(0) ? T(1) : std::exp(v); }),
                              node<EluGradNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
struct EluNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "elu"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {mul(g, elu_grad(this->inputs_[0]))}; }
};

// ------------------------------------------------------------------ reductions

template <typename T>
struct SumNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "sum"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {expand(g, this->inputs_[0].shape())}; }
};

template <typename T>
struct ExpandNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "expand"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {reshape(sum(g), this->inputs_[0].shape())};
    }
};

template <typename T>
struct SumAxisNode final : Node<T> {
    SumAxisNode(std::vector<Tensor<T>> in, std::size_t axis) : Node<T>(std::move(in)), axis_(axis) {}
    std::string_view name() const override { return "sum_axis"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        return {broadcast_axis(g, this->inputs_[0].shape(), axis_)};
    }
    std::size_t axis_;
};

template <typename T>
struct BroadcastAxisNode final : Node<T> {
    BroadcastAxisNode(std::vector<Tensor<T>> in, std::size_t axis) : Node<T>(std::move(in)), axis_(axis) {}
    std::string_view name() const override { return "broadcast_axis"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {sum_axis(g, axis_)}; }
    std::size_t axis_;
};

template <typename T>
struct ReshapeNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "reshape"; }
    Grads<T> backward(const Tensor<T>& g) const override { return {reshape(g, this->inputs_[0].shape())}; }
};

struct AxisSplit {
    std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    if (axis >= s.rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + s.str());
    }
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.rank(); ++i) r.inner *= s[i];
    return r;
}

// --------------------------------------------------------------------- concat

template <typename T>
Shape with_channels(const Shape& s, std::int64_t c) {
    auto dims = s.dims();
    dims[1] = c;
    return Shape(dims);
}

template <typename T>
struct ConcatNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "concat_channels"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        Grads<T> out(this->inputs_.size());
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < this->inputs_.size(); ++i) {
            const std::int64_t c = this->inputs_[i].shape()[1];
            if (this->needs_grad(i)) out[i] = slice_channels(g, offset, c);
            offset += c;
        }
        return out;
    }
};

template <typename T>
struct SliceNode final : Node<T> {
    SliceNode(std::vector<Tensor<T>> in, std::int64_t start, std::int64_t count)
        : Node<T>(std::move(in)), start_(start), count_(count) {}
    std::string_view name() const override { return "slice_channels"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const Shape& full = this->inputs_[0].shape();
        std::vector<Tensor<T>> parts;
        if (start_ > 0) parts.push_back(Tensor<T>::zeros(with_channels<T>(full, start_)));
        parts.push_back(g);
        const std::int64_t rest = full[1] - start_ - count_;
        if (rest > 0) parts.push_back(Tensor<T>::zeros(with_channels<T>(full, rest)));
        return {concat_channels<T>(parts)};
    }
    std::int64_t start_, count_;
};

// --------------------------------------------------------------------- matmul

template <typename T>
struct MatmulNode final : Node<T> {
    MatmulNode(std::vector<Tensor<T>> in, bool ta, bool tb) : Node<T>(std::move(in)), ta_(ta), tb_(tb) {}
    std::string_view name() const override { return "matmul"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const auto& a = this->inputs_[0];
        const auto& b = this->inputs_[1];
        Tensor<T> ga, gb;
        if (this->needs_grad(0)) ga = ta_ ? matmul(b, g, tb_, true) : matmul(g, b, false, !tb_);
        if (this->needs_grad(1)) gb = tb_ ? matmul(g, a, true, ta_) : matmul(a, g, !ta_, false);
        return {ga, gb};
    }
    bool ta_, tb_;
};

// ----------------------------------------------------------------------- conv
//
// conv3d, conv3d_input_grad and conv3d_weight_grad are the three partial
// adjoints of the trilinear form <conv3d(x, w), gy>, so each one's backward is
// written with the other two.

struct ConvParams {
    std::int64_t stride;
    Padding padding;
};

template <typename T>
struct ConvNode final : Node<T> {
    ConvNode(std::vector<Tensor<T>> in, ConvParams conv) : Node<T>(std::move(in)), conv_(conv) {}
    std::string_view name() const override { return "conv3d"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const auto& x = this->inputs_[0];
        const auto& w = this->inputs_[1];
        Tensor<T> gx, gw;
        if (this->needs_grad(0)) gx = conv3d_input_grad(g, w, x.shape(), conv_.stride, conv_.padding);
        if (this->needs_grad(1)) gw = conv3d_weight_grad(x, g, w.shape(), conv_.stride, conv_.padding);
        return {gx, gw};
    }
    ConvParams conv_;
};

template <typename T>
struct ConvInputGradNode final : Node<T> {
    ConvInputGradNode(std::vector<Tensor<T>> in, ConvParams conv) : Node<T>(std::move(in)), conv_(conv) {}
    std::string_view name() const override { return "conv3d_input_grad"; }
    Grads<T> backward(const Tensor<T>& h) const override {
        const auto& gy = this->inputs_[0];
        const auto& w = this->inputs_[1];
        Tensor<T> d_gy, d_w;
        if (this->needs_grad(0)) d_gy = conv3d(h, w, conv_.stride, conv_.padding);
        if (this->needs_grad(1)) d_w = conv3d_weight_grad(h, gy, w.shape(), conv_.stride, conv_.padding);
        return {d_gy, d_w};
    }
    ConvParams conv_;
};

template <typename T>
struct ConvWeightGradNode final : Node<T> {
    ConvWeightGradNode(std::vector<Tensor<T>> in, ConvParams conv) : Node<T>(std::move(in)), conv_(conv) {}
    std::string_view name() const override { return "conv3d_weight_grad"; }
    Grads<T> backward(const Tensor<T>& h) const override {
        const auto& x = this->inputs_[0];
        const auto& gy = this->inputs_[1];
        Tensor<T> d_x, d_gy;
        if (this->needs_grad(0)) d_x = conv3d_input_grad(gy, h, x.shape(), conv_.stride, conv_.padding);
        if (this->needs_grad(1)) d_gy = conv3d(x, h, conv_.stride, conv_.padding);
        return {d_x, d_gy};
    }
    ConvParams conv_;
};

Shape output_shape(const ConvGeometry& g) {
    return Shape{g.batch, g.out_channels, g.out[0], g.out[1], g.out[2]};
}

}  // namespace

// ============================================================== elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    return Tensor<T>::from_op(a.shape(), zip_values(a, b, [](T x, T y) { return x + y; }),
                              node<AddNode<T>>(std::vector<Tensor<T>>{a, b}));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    return Tensor<T>::from_op(a.shape(), zip_values(a, b, [](T x, T y) { return x - y; }),
                              node<SubNode<T>>(std::vector<Tensor<T>>{a, b}));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    return Tensor<T>::from_op(a.shape(), zip_values(a, b, [](T x, T y) { return x * y; }),
                              node<MulNode<T>>(std::vector<Tensor<T>>{a, b}));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return -v; }),
                              node<NegNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return std::abs(v); }),
                              node<AbsNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return v * v; }),
                              node<SquareNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    auto v = x.values();
    if (std::any_of(v.begin(), v.end(), [](T e) { return e < T(0); })) {
        throw DomainError("sqrt of a negative value");
    }
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T e) { return std::sqrt(e); }),
                              node<SqrtNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
    auto v = x.values();
    if (std::any_of(v.begin(), v.end(), [](T e) { return e == T(0); })) {
        throw DomainError("reciprocal of zero");
    }
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T e) { return T(1) / e; }),
                              node<ReciprocalNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
    const T cc = static_cast<T>(c);
    return Tensor<T>::from_op(x.shape(), map_values(x, [cc](T v) { return v + cc; }),
                              node<AddScalarNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double c) {
    const T cc = static_cast<T>(c);
    return Tensor<T>::from_op(x.shape(), map_values(x, [cc](T v) { return v * cc; }),
                              node<MulScalarNode<T>>(std::vector<Tensor<T>>{x}, c));
}

// ============================================================== activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return v > T(0) ? v : T(0); }),
                              node<ReluNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double alpha) {
    const T a = static_cast<T>(alpha);
    return Tensor<T>::from_op(x.shape(), map_values(x, [a](T v) { return v > T(0) ? v : a * v; }),
                              node<LeakyReluNode<T>>(std::vector<Tensor<T>>{x}, alpha));
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
    return Tensor<T>::from_op(x.shape(), map_values(x, [](T v) { return v > T(0) ? v : std::expm1(v); }),
                              node<EluNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, const Activation& act) {
    switch (act.kind) {
        case ActivationKind::elu: return elu(x);
        case ActivationKind::relu: return relu(x);
        case ActivationKind::leaky_relu: return leaky_relu(x, act.alpha);
    }
    throw std::invalid_argument("unknown activation kind");
}

// =============================================================== reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    auto v = x.values();
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    return Tensor<T>::from_op(Shape{}, std::vector<T>{static_cast<T>(total)},
                              node<SumNode<T>>(std::vector<Tensor<T>>{x}));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    const auto sp = split_at(x.shape(), axis);
    auto v = x.values();
    std::vector<double> acc(static_cast<std::size_t>(sp.len), 0.0);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t j = 0; j < sp.len; ++j) {
            const T* p = v.data() + (o * sp.len + j) * sp.inner;
            double s = 0.0;
            for (std::int64_t i = 0; i < sp.inner; ++i) s += p[i];
            acc[static_cast<std::size_t>(j)] += s;
        }
    }
    std::vector<T> out(acc.begin(), acc.end());
    return Tensor<T>::from_op(Shape{sp.len}, std::move(out),
                              node<SumAxisNode<T>>(std::vector<Tensor<T>>{x}, axis));
}

template <typename T>
Tensor<T> broadcast_axis(const Tensor<T>& v, const Shape& shape, std::size_t axis) {
    const auto sp = split_at(shape, axis);
    if (v.numel() != sp.len) {
        throw ShapeError("broadcast_axis: " + v.shape().str() + " cannot fill axis " + std::to_string(axis) +
                         " of " + shape.str());
    }
    auto src = v.values();
    std::vector<T> out(static_cast<std::size_t>(shape.numel()));
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t j = 0; j < sp.len; ++j) {
            T* p = out.data() + (o * sp.len + j) * sp.inner;
            std::fill(p, p + sp.inner, src[static_cast<std::size_t>(j)]);
        }
    }
    return Tensor<T>::from_op(shape, std::move(out), node<BroadcastAxisNode<T>>(std::vector<Tensor<T>>{v}, axis));
}

template <typename T>
Tensor<T> expand(const Tensor<T>& scalar, const Shape& shape) {
    if (scalar.numel() != 1) {
        throw ShapeError("expand: expected a single-element tensor, got " + scalar.shape().str());
    }
    return Tensor<T>::from_op(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()), scalar.values()[0]),
                              node<ExpandNode<T>>(std::vector<Tensor<T>>{scalar}));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
    if (shape.numel() != x.numel()) {
        throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
    }
    return Tensor<T>::from_op(shape, x.to_vector(), node<ReshapeNode<T>>(std::vector<Tensor<T>>{x}));
}

// =================================================================== concat

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape& first = xs[0].shape();
    if (first.rank() < 2) throw ShapeError("concat_channels: rank must be >= 2, got " + first.str());
    if (xs.size() == 1) {
        // Keep a node so gradients still route through a distinct tensor.
        return Tensor<T>::from_op(first, xs[0].to_vector(), node<ConcatNode<T>>(std::vector<Tensor<T>>{xs[0]}));
    }
    std::int64_t channels = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        bool ok = s.rank() == first.rank() && s[0] == first[0];
        for (std::size_t a = 2; ok && a < s.rank(); ++a) ok = s[a] == first[a];
        if (!ok) throw ShapeError("concat_channels: dimension mismatch " + first.str() + " vs " + s.str());
        channels += s[1];
    }
    const Shape out_shape = with_channels<T>(first, channels);
    const std::int64_t batch = first[0];
    const std::int64_t plane = first.numel() / (first[0] * first[1]);
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::int64_t n = 0; n < batch; ++n) {
        T* dst = out.data() + n * channels * plane;
        for (const auto& x : xs) {
            const std::int64_t c = x.shape()[1];
            auto v = x.values();
            std::copy_n(v.data() + n * c * plane, c * plane, dst);
            dst += c * plane;
        }
    }
    return Tensor<T>::from_op(out_shape, std::move(out),
                              node<ConcatNode<T>>(std::vector<Tensor<T>>(xs.begin(), xs.end())));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t start, std::int64_t count) {
    const Shape& s = x.shape();
    if (s.rank() < 2 || start < 0 || count < 1 || start + count > s[1]) {
        throw ShapeError("slice_channels: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + s.str());
    }
    const std::int64_t plane = s.numel() / (s[0] * s[1]);
    std::vector<T> out(static_cast<std::size_t>(s[0] * count * plane));
    auto v = x.values();
    for (std::int64_t n = 0; n < s[0]; ++n) {
        std::copy_n(v.data() + (n * s[1] + start) * plane, count * plane, out.data() + n * count * plane);
    }
    return Tensor<T>::from_op(with_channels<T>(s, count), std::move(out),
                              node<SliceNode<T>>(std::vector<Tensor<T>>{x}, start, count));
}

// =================================================================== matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
    if (a.shape().rank() != 2 || b.shape().rank() != 2) {
        throw ShapeError("matmul: rank-2 operands required, got " + a.shape().str() + " and " + b.shape().str());
    }
    const std::int64_t m = transpose_a ? a.shape()[1] : a.shape()[0];
    const std::int64_t k = transpose_a ? a.shape()[0] : a.shape()[1];
    const std::int64_t kb = transpose_b ? b.shape()[1] : b.shape()[0];
    const std::int64_t n = transpose_b ? b.shape()[0] : b.shape()[1];
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions differ for " + a.shape().str() + " and " + b.shape().str());
    }
    std::vector<T> out(static_cast<std::size_t>(m * n));
    detail::gemm(transpose_a, transpose_b, m, n, k, 1.0, a.values().data(), a.shape()[1], b.values().data(),
                 b.shape()[1], 0.0, out.data(), n);
    return Tensor<T>::from_op(Shape{m, n}, std::move(out),
                              node<MatmulNode<T>>(std::vector<Tensor<T>>{a, b}, transpose_a, transpose_b));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.shape().rank() != 2 || w.shape().rank() != 2 || x.shape()[1] != w.shape()[1]) {
        throw ShapeError("linear: input " + x.shape().str() + " incompatible with weight " + w.shape().str());
    }
    if (b.numel() != w.shape()[0]) {
        throw ShapeError("linear: bias " + b.shape().str() + " does not match weight " + w.shape().str());
    }
    auto y = matmul(x, w, false, true);
    return add(y, broadcast_axis(b, y.shape(), 1));
}

// ===================================================================== conv

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::int64_t stride, Padding padding) {
    if (x.rank() != 5) throw ShapeError("conv3d: input must be (N,C,D,H,W), got " + x.str());
    if (w.rank() != 5) throw ShapeError("conv3d: weight must be (Cout,Cin,kd,kh,kw), got " + w.str());
    if (x[1] != w[1]) {
        throw ShapeError("conv3d: input has " + std::to_string(x[1]) + " channels but weight expects " +
                         std::to_string(w[1]) + " (" + x.str() + " vs " + w.str() + ")");
    }
    if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
    ConvGeometry g;
    g.batch = x[0];
    g.in_channels = x[1];
    g.out_channels = w[0];
    g.stride = stride;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::int64_t in = x[a + 2];
        const std::int64_t k = w[a + 2];
        g.in[a] = in;
        g.kernel[a] = k;
        if (padding == Padding::same) {
            const std::int64_t out = (in + stride - 1) / stride;
            const std::int64_t total = std::max<std::int64_t>((out - 1) * stride + k - in, 0);
            g.out[a] = out;
            g.pad_before[a] = total / 2;
        } else {
            if (k > in) {
                throw ShapeError("conv3d: kernel " + w.str() + " larger than unpadded input " + x.str());
            }
            g.out[a] = (in - k) / stride + 1;
            g.pad_before[a] = 0;
        }
    }
    return g;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride, Padding padding) {
    const auto g = conv_geometry(x.shape(), w.shape(), stride, padding);
    const Shape out_shape = output_shape(g);
    std::vector<T> out(static_cast<std::size_t>(out_shape.numel()));
    detail::conv_forward(g, x.values().data(), w.values().data(), out.data());
    return Tensor<T>::from_op(out_shape, std::move(out),
                              node<ConvNode<T>>(std::vector<Tensor<T>>{x, w}, ConvParams{stride, padding}));
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::int64_t stride,
                 Padding padding) {
    if (bias.numel() != w.shape()[0]) {
        throw ShapeError("conv3d: bias " + bias.shape().str() + " does not match weight " + w.shape().str());
    }
    auto y = conv3d(x, w, stride, padding);
    return add(y, broadcast_axis(bias, y.shape(), 1));
}

template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& input_shape,
                            std::int64_t stride, Padding padding) {
    const auto g = conv_geometry(input_shape, w.shape(), stride, padding);
    require_same_shape(grad_out.shape(), output_shape(g), "conv3d_input_grad");
    std::vector<T> out(static_cast<std::size_t>(input_shape.numel()));
    detail::conv_input_grad(g, grad_out.values().data(), w.values().data(), out.data());
    return Tensor<T>::from_op(input_shape, std::move(out),
                              node<ConvInputGradNode<T>>(std::vector<Tensor<T>>{grad_out, w}, ConvParams{stride, padding}));
}

template <typename T>
Tensor<T> conv3d_weight_grad(const Tensor<T>& x, const Tensor<T>& grad_out, const Shape& weight_shape,
                             std::int64_t stride, Padding padding) {
    const auto g = conv_geometry(x.shape(), weight_shape, stride, padding);
    require_same_shape(grad_out.shape(), output_shape(g), "conv3d_weight_grad");
    std::vector<T> out(static_cast<std::size_t>(weight_shape.numel()));
    detail::conv_weight_grad(g, x.values().data(), grad_out.values().data(), out.data());
    return Tensor<T>::from_op(weight_shape, std::move(out),
                              node<ConvWeightGradNode<T>>(std::vector<Tensor<T>>{x, grad_out}, ConvParams{stride, padding}));
}

// ============================================================ normalization

namespace {

// (x - mean) / sqrt(var + eps) with statistics over every axis except `axis`.
template <typename T>
struct Standardized {
    Tensor<T> value;
    Tensor<T> mean;  // (len), constant
    Tensor<T> var;   // (len), biased, constant
    std::int64_t count;
};

struct AxisStats {
    std::vector<double> mean, var, inv_std;
};

template <typename T>
AxisStats axis_stats(std::span<const T> v, const AxisSplit& sp, double eps) {
    AxisStats st;
    st.mean.assign(static_cast<std::size_t>(sp.len), 0.0);
    st.var.assign(static_cast<std::size_t>(sp.len), 0.0);
    st.inv_std.resize(static_cast<std::size_t>(sp.len));
    const double inv_count = 1.0 / static_cast<double>(sp.outer * sp.inner);
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.len; ++c) {
            const T* p = v.data() + (o * sp.len + c) * sp.inner;
            double acc = 0.0;
            for (std::int64_t i = 0; i < sp.inner; ++i) acc += p[i];
            st.mean[static_cast<std::size_t>(c)] += acc;
        }
    for (auto& m : st.mean) m *= inv_count;
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.len; ++c) {
            const T* p = v.data() + (o * sp.len + c) * sp.inner;
            const double m = st.mean[static_cast<std::size_t>(c)];
            double acc = 0.0;
            for (std::int64_t i = 0; i < sp.inner; ++i) acc += (p[i] - m) * (p[i] - m);
            st.var[static_cast<std::size_t>(c)] += acc;
        }
    for (std::size_t c = 0; c < st.var.size(); ++c) {
        st.var[c] *= inv_count;
        st.inv_std[c] = 1.0 / std::sqrt(st.var[c] + eps);
    }
    return st;
}

// The same map written with differentiable ops; used when a backward pass
// itself is being recorded.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> standardize_graph(const Tensor<T>& x, std::size_t axis, double eps) {
    const Shape& s = x.shape();
    const double inv_count = static_cast<double>(s[axis]) / static_cast<double>(s.numel());
    auto mu = mul_scalar(sum_axis(x, axis), inv_count);
    auto centered = sub(x, broadcast_axis(mu, s, axis));
    auto var = mul_scalar(sum_axis(square(centered), axis), inv_count);
    auto inv_std = reciprocal(sqrt(add_scalar(var, eps)));
    return {mul(centered, broadcast_axis(inv_std, s, axis)), inv_std};
}

// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)), means over the
// reduced axes.
template <typename T>
struct StandardizeNode final : Node<T> {
    StandardizeNode(std::vector<Tensor<T>> in, std::size_t axis, double eps)
        : Node<T>(std::move(in)), axis_(axis), eps_(eps) {}
    std::string_view name() const override { return "standardize"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const auto& x = this->inputs_[0];
        const Shape& s = x.shape();
        const double inv_count = static_cast<double>(s[axis_]) / static_cast<double>(s.numel());
        if (grad_enabled()) {
            auto [xhat, inv_std] = standardize_graph(x, axis_, eps_);
            auto mg = mul_scalar(sum_axis(g, axis_), inv_count);
            auto mgx = mul_scalar(sum_axis(mul(g, xhat), axis_), inv_count);
            auto inner = sub(sub(g, broadcast_axis(mg, s, axis_)), mul(xhat, broadcast_axis(mgx, s, axis_)));
            return {mul(inner, broadcast_axis(inv_std, s, axis_))};
        }
        const auto sp = split_at(s, axis_);
        auto xv = x.values();
        auto gv = g.values();
        const auto st = axis_stats(xv, sp, eps_);
        std::vector<double> mg(static_cast<std::size_t>(sp.len), 0.0), mgx(static_cast<std::size_t>(sp.len), 0.0);
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.len; ++c) {
                const auto cc = static_cast<std::size_t>(c);
                const std::int64_t base = (o * sp.len + c) * sp.inner;
                double a = 0.0, b = 0.0;
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const double gi = gv[static_cast<std::size_t>(base + i)];
                    a += gi;
                    b += gi * (xv[static_cast<std::size_t>(base + i)] - st.mean[cc]);
                }
                mg[cc] += a;
                mgx[cc] += b * st.inv_std[cc];
            }
        std::vector<T> out(xv.size());
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.len; ++c) {
                const auto cc = static_cast<std::size_t>(c);
                const double m = st.mean[cc], is = st.inv_std[cc];
                const double a = mg[cc] * inv_count, b = mgx[cc] * inv_count;
                const std::int64_t base = (o * sp.len + c) * sp.inner;
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const auto k = static_cast<std::size_t>(base + i);
                    const double xhat = (xv[k] - m) * is;
                    out[k] = static_cast<T>(is * (gv[k] - a - xhat * b));
                }
            }
        return {Tensor<T>(s, std::move(out))};
    }
    std::size_t axis_;
    double eps_;
};

template <typename T>
Standardized<T> standardize(const Tensor<T>& x, std::size_t axis, double eps) {
    const Shape& s = x.shape();
    const auto sp = split_at(s, axis);
    auto v = x.values();
    const auto st = axis_stats(v, sp, eps);
    std::vector<T> out(v.size());
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.len; ++c) {
            const auto cc = static_cast<std::size_t>(c);
            const std::int64_t base = (o * sp.len + c) * sp.inner;
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const auto k = static_cast<std::size_t>(base + i);
                out[k] = static_cast<T>((v[k] - st.mean[cc]) * st.inv_std[cc]);
            }
        }
    std::vector<T> mean(st.mean.begin(), st.mean.end()), var(st.var.begin(), st.var.end());
    return {Tensor<T>::from_op(s, std::move(out), node<StandardizeNode<T>>(std::vector<Tensor<T>>{x}, axis, eps)),
            Tensor<T>(Shape{sp.len}, std::move(mean)), Tensor<T>(Shape{sp.len}, std::move(var)),
            sp.outer * sp.inner};
}

// y = x * gain[c] + bias[c] over axis 1.
template <typename T>
struct ChannelAffineNode final : Node<T> {
    using Node<T>::Node;
    std::string_view name() const override { return "channel_affine"; }
    Grads<T> backward(const Tensor<T>& g) const override {
        const auto& x = this->inputs_[0];
        const auto& gain = this->inputs_[1];
        const auto& bias = this->inputs_[2];
        const Shape& s = x.shape();
        Grads<T> out(3);
        if (grad_enabled()) {
            if (this->needs_grad(0)) out[0] = mul(g, broadcast_axis(gain, s, 1));
            if (this->needs_grad(1)) out[1] = reshape(sum_axis(mul(g, x), 1), gain.shape());
            if (this->needs_grad(2)) out[2] = reshape(sum_axis(g, 1), bias.shape());
            return out;
        }
        const auto sp = split_at(s, 1);
        auto xv = x.values();
        auto gv = g.values();
        auto wv = gain.values();
        std::vector<T> gx(this->needs_grad(0) ? xv.size() : 0);
        std::vector<double> gw(static_cast<std::size_t>(sp.len), 0.0), gb(static_cast<std::size_t>(sp.len), 0.0);
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.len; ++c) {
                const auto cc = static_cast<std::size_t>(c);
                const std::int64_t base = (o * sp.len + c) * sp.inner;
                double a = 0.0, b = 0.0;
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const auto k = static_cast<std::size_t>(base + i);
                    a += static_cast<double>(gv[k]) * xv[k];
                    b += gv[k];
                    if (!gx.empty()) gx[k] = gv[k] * wv[cc];
                }
                gw[cc] += a;
                gb[cc] += b;
            }
        if (this->needs_grad(0)) out[0] = Tensor<T>(s, std::move(gx));
        if (this->needs_grad(1)) out[1] = Tensor<T>(gain.shape(), std::vector<T>(gw.begin(), gw.end()));
        if (this->needs_grad(2)) out[2] = Tensor<T>(bias.shape(), std::vector<T>(gb.begin(), gb.end()));
        return out;
    }
};

template <typename T>
Tensor<T> affine_channels(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    const Shape& s = x.shape();
    if (s.rank() < 2 || gain.numel() != s[1] || bias.numel() != s[1]) {
        throw ShapeError("normalize: gain/bias " + gain.shape().str() + "/" + bias.shape().str() +
                         " do not match channels of " + s.str());
    }
    const auto sp = split_at(s, 1);
    auto xv = x.values();
    auto wv = gain.values();
    auto bv = bias.values();
    std::vector<T> out(xv.size());
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.len; ++c) {
            const auto cc = static_cast<std::size_t>(c);
            const std::int64_t base = (o * sp.len + c) * sp.inner;
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const auto k = static_cast<std::size_t>(base + i);
                out[k] = xv[k] * wv[cc] + bv[cc];
            }
        }
    return Tensor<T>::from_op(s, std::move(out), node<ChannelAffineNode<T>>(std::vector<Tensor<T>>{x, gain, bias}));
}

}  // namespace

template <typename T>
RunningStats<T> RunningStats<T>::fresh(std::int64_t channels) {
    return RunningStats{Tensor<T>::zeros(Shape{channels}), Tensor<T>::ones(Shape{channels}), 0, 0.1};
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
    if (x.shape().rank() < 2) throw ShapeError("layer_norm: rank must be >= 2, got " + x.shape().str());
    return affine_channels(standardize(x, 0, eps).value, gain, bias);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, RunningStats<T>* stats,
                     Mode mode, double eps) {
    const Shape& s = x.shape();
    if (s.rank() < 2) throw ShapeError("batch_norm: rank must be >= 2, got " + s.str());
    if (mode == Mode::eval) {
        if (!stats || !stats->populated()) {
            throw GraphError("batch_norm: eval mode requires populated running statistics");
        }
        auto centered = sub(x, broadcast_axis(stats->mean, s, 1));
        auto inv_std = constant_like(stats->var, [eps](T v) { return static_cast<T>(1.0 / std::sqrt(v + eps)); });
        return affine_channels(mul(centered, broadcast_axis(inv_std, s, 1)), gain, bias);
    }
    auto st = standardize(x, 1, eps);
    if (stats) {
        const double m = stats->momentum;
        const double unbias = st.count > 1 ? static_cast<double>(st.count) / static_cast<double>(st.count - 1) : 1.0;
        auto rm = stats->mean.values();
        auto rv = stats->var.values();
        auto bm = st.mean.values();
        auto bv = st.var.values();
        std::vector<T> new_mean(rm.size()), new_var(rv.size());
        for (std::size_t c = 0; c < rm.size(); ++c) {
            new_mean[c] = static_cast<T>((1.0 - m) * rm[c] + m * bm[c]);
            new_var[c] = static_cast<T>((1.0 - m) * rv[c] + m * bv[c] * unbias);
        }
        stats->mean = Tensor<T>(stats->mean.shape(), std::move(new_mean));
        stats->var = Tensor<T>(stats->var.shape(), std::move(new_var));
        ++stats->batches_tracked;
    }
    return affine_channels(st.value, gain, bias);
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                    Mode mode, RunningStats<T>* stats) {
    if (kind == NormKind::layer_norm) return layer_norm(x, gain, bias, eps);
    return batch_norm(x, gain, bias, stats, mode, eps);
}

// ====================================================== explicit instances

#define VOXELSR_INSTANTIATE_OPS(T)                                                                                  \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> neg<T>(const Tensor<T>&);                                                                    \
    template Tensor<T> abs<T>(const Tensor<T>&);                                                                    \
    template Tensor<T> square<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> sqrt<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> reciprocal<T>(const Tensor<T>&);                                                             \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, double);                                                     \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, double);                                                     \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, double);                                                     \
    template Tensor<T> elu<T>(const Tensor<T>&);                                                                    \
    template Tensor<T> activation<T>(const Tensor<T>&, const Activation&);                                          \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                                    \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> sum_axis<T>(const Tensor<T>&, std::size_t);                                                  \
    template Tensor<T> broadcast_axis<T>(const Tensor<T>&, const Shape&, std::size_t);                              \
    template Tensor<T> expand<T>(const Tensor<T>&, const Shape&);                                                   \
    template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                                  \
    template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);                                              \
    template Tensor<T> slice_channels<T>(const Tensor<T>&, std::int64_t, std::int64_t);                             \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);                                   \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, std::int64_t, Padding);                        \
    template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t, Padding);      \
    template Tensor<T> conv3d_input_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, std::int64_t,         \
                                            Padding);                                                               \
    template Tensor<T> conv3d_weight_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, std::int64_t,        \
                                             Padding);                                                              \
    template struct RunningStats<T>;                                                                                \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                 \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, RunningStats<T>*, Mode,  \
                                     double);                                                                       \
    template Tensor<T> normalize<T>(const Tensor<T>&, NormKind, const Tensor<T>&, const Tensor<T>&, double, Mode,   \
                                    RunningStats<T>*);

VOXELSR_INSTANTIATE_OPS(float)
VOXELSR_INSTANTIATE_OPS(double)

#undef VOXELSR_INSTANTIATE_OPS

}  // namespace voxelsr::ad
