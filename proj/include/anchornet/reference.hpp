#pragma once

// Serial, direct-definition versions of the forward kernels. They favor
// obviousness over speed and accumulate in double; tests compare the
// OpenMP kernels against them and the benchmark uses them as a baseline.

#include "anchornet/kernels.hpp"

namespace anchornet::reference {

/// out(n, oc, i, j) = sum over (ic, r, s) of w(oc, ic, r, s) * in(n, g*icpg + ic, i*sh + r, j*sw + s)
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const ConvKernel<T>& kernel);

template <typename T>
Tensor<T> gap(const Tensor<T>& input);

template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& input, std::span<const T> gamma,
                          std::span<const T> beta, double eps);

/// Evaluates the half-pixel bilinear formula independently per output pixel.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w);

}  // namespace anchornet::reference
