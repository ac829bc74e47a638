#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "voxelsr/autodiff/tensor.hpp"

namespace voxelsr::ad {

// ---------------------------------------------------------------------------
// Elementwise. Binary ops require identical shapes; there is no broadcasting
// beyond the explicit axis/scalar forms further down.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> neg(const Tensor<T>& x);
// Subgradient sign(0) = 0.
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
// Throws DomainError for negative input. The derivative at 0 is taken as 0.
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& x);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, double c);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, double c);

// ---------------------------------------------------------------------------
// Activations. Kinks use subgradient 0.

enum class ActivationKind { elu, relu, leaky_relu };

struct Activation {
    ActivationKind kind = ActivationKind::elu;
    double alpha = 0.2;  // leaky slope; ignored by the other kinds

    friend bool operator==(const Activation&, const Activation&) = default;
};

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, double alpha);
template <typename T> Tensor<T> elu(const Tensor<T>& x);
template <typename T> Tensor<T> activation(const Tensor<T>& x, const Activation& act);

// ---------------------------------------------------------------------------
// Reductions and their adjoint broadcasts.

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Sum over every axis except `axis`; result has shape (dims[axis]).
template <typename T> Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);
// Replicates v (shape (shape[axis])) along every other axis of `shape`.
template <typename T> Tensor<T> broadcast_axis(const Tensor<T>& v, const Shape& shape, std::size_t axis);
// Replicates a one-element tensor over `shape`.
template <typename T> Tensor<T> expand(const Tensor<T>& scalar, const Shape& shape);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);

// ---------------------------------------------------------------------------
// Channel concatenation along axis 1 of (N, C, ...) tensors.

template <typename T> Tensor<T> concat_channels(std::span<const Tensor<T>> xs);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t start, std::int64_t count);

// ---------------------------------------------------------------------------
// Dense layers.

// op(a) * op(b) for rank-2 operands.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b);
// x: (N, F), w: (Fout, F), b: (Fout) -> (N, Fout)
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation) over (N, C, D, H, W).

enum class Padding { same, valid };

struct ConvGeometry {
    std::int64_t batch = 0;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::array<std::int64_t, 3> in{};
    std::array<std::int64_t, 3> kernel{};
    std::array<std::int64_t, 3> out{};
    std::array<std::int64_t, 3> pad_before{};
    std::int64_t stride = 1;
};

// `same` keeps ceil(in / stride) outputs per axis; any odd padding goes after
// the data. `valid` uses no padding.
ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::int64_t stride, Padding padding);

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride = 1, Padding padding = Padding::same);
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::int64_t stride = 1,
                 Padding padding = Padding::same);
// Adjoint of conv3d with respect to its input (a transposed convolution).
template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& input_shape,
                            std::int64_t stride, Padding padding);
// Adjoint of conv3d with respect to its weights.
template <typename T>
Tensor<T> conv3d_weight_grad(const Tensor<T>& x, const Tensor<T>& grad_out, const Shape& weight_shape,
                             std::int64_t stride, Padding padding);

// ---------------------------------------------------------------------------
// Normalization. gain/bias have shape (C).

enum class NormKind { batch_norm, layer_norm };
enum class Mode { train, eval };

// Per-sample normalization over (C, D, H, W).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5);

template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
    std::int64_t batches_tracked = 0;
    double momentum = 0.1;

    [[nodiscard]] bool populated() const noexcept { return batches_tracked > 0; }
    static RunningStats fresh(std::int64_t channels);
};

// Per-channel normalization over (N, D, H, W). In train mode, batch statistics
// are used and `stats` (when given) is updated with the biased batch mean and
// the unbiased batch variance. Eval mode uses `stats` and throws GraphError
// when they have never been populated.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, RunningStats<T>* stats,
                     Mode mode, double eps = 1e-5);

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                    Mode mode, RunningStats<T>* stats = nullptr);

}  // namespace voxelsr::ad
