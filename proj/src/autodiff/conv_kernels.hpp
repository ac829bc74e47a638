#pragma once

#include "voxelsr/autodiff/ops.hpp"

namespace voxelsr::ad::detail {

// Raw convolution kernels over contiguous (N, C, D, H, W) buffers, lowered to
// GEMM (one per tap for stride 1, a chunked patch matrix otherwise). Outputs
// are overwritten.
template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y);

template <typename T>
void conv_input_grad(const ConvGeometry& g, const T* grad_out, const T* w, T* grad_x);

template <typename T>
void conv_weight_grad(const ConvGeometry& g, const T* x, const T* grad_out, T* grad_w);

}  // namespace voxelsr::ad::detail
