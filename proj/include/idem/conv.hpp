#pragma once

#include "idem/tensor.hpp"

// 3x3 convolution kernels with padding 1, lowered to im2col + GEMM over the
// whole batch. Weights use the usual layouts:
//   conv2d            weight (out, in, 3, 3)
//   conv_transpose2d  weight (in, out, 3, 3), stride 2, output exactly 2x input
namespace idem::kernels {

inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kTaps = kKernel * kKernel;

inline std::size_t conv_out_extent(std::size_t in, std::size_t stride) {
  return (in + 2 - kKernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride);

/// Accumulates into dx/dweight/dbias; any of them may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     std::size_t stride, Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias);

template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& weight,
                                   const Tensor<T>& bias);

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                               Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias);

}  // namespace idem::kernels
