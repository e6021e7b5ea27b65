#pragma once

// Forward kernels and their vector-Jacobian products. Every kernel
// parallelizes over independent output planes with OpenMP; no kernel
// reduces across threads, so results are identical for any thread count.

#include <optional>

#include "anchornet/tensor.hpp"

namespace anchornet {

struct Stride {
  int h = 1;
  int w = 1;
  bool operator==(const Stride&) const = default;
};

/// Padding-free convolution kernel. Weights are (out, in / groups, kh, kw).
template <typename T>
struct ConvKernel {
  Tensor<T> weights;
  Stride stride{};
  int groups = 1;
};

enum class NormMode { kTrain, kInfer };

/// Batch normalization parameters and running statistics for one layer.
/// Empty running statistics mean none have been populated.
template <typename T>
struct BatchNormParams {
  std::span<const T> gamma;
  std::span<const T> beta;
  std::span<T> running_mean;
  std::span<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel statistics saved by the training-mode forward for backward.
template <typename T>
struct BatchNormCache {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

namespace kernels {

/// Output shape of a valid convolution; throws ShapeError on incompatible
/// inputs (kernel larger than input, channel/group mismatch).
Shape conv_output_shape(const Shape& input, const Shape& weights,
                        Stride stride, int groups);

template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const ConvKernel<T>& kernel);

/// Gradients of a valid convolution. Either output pointer may be null.
template <typename T>
void conv2d_valid_backward(const Tensor<T>& input, const ConvKernel<T>& kernel,
                           const Tensor<T>& grad_output, Tensor<T>* grad_input,
                           Tensor<T>* grad_weights);

template <typename T>
Tensor<T> gap(const Tensor<T>& input);
template <typename T>
Tensor<T> gap_backward(const Shape& input_shape, const Tensor<T>& grad_output);

/// features (N, C, 1, 1) x weights (K, C, 1, 1) [+ bias (K)] -> (N, K, 1, 1).
template <typename T>
Tensor<T> linear(const Tensor<T>& features, const Tensor<T>& weights,
                 const Tensor<T>* bias);
template <typename T>
void linear_backward(const Tensor<T>& features, const Tensor<T>& weights,
                     const Tensor<T>& grad_output, Tensor<T>* grad_features,
                     Tensor<T>* grad_weights, Tensor<T>* grad_bias);

/// Max-subtracted softmax over one logit vector.
template <typename T>
std::vector<T> softmax(std::span<const T> logits);
/// Row-wise softmax over the channel axis of an (N, K, 1, 1) tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

template <typename T>
Tensor<T> silu(const Tensor<T>& input);
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& input, const Tensor<T>& grad_output);

/// Training mode normalizes with batch statistics over (N, H, W) and updates
/// running statistics; inference mode uses the running statistics and throws
/// StateError when none are populated.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const BatchNormParams<T>& params,
                    NormMode mode, BatchNormCache<T>* cache = nullptr);
template <typename T>
void batchnorm_backward(const Tensor<T>& input,
                        const BatchNormParams<T>& params, NormMode mode,
                        const BatchNormCache<T>& cache,
                        const Tensor<T>& grad_output, Tensor<T>* grad_input,
                        std::span<T> grad_gamma, std::span<T> grad_beta);

/// Half-pixel-center (align_corners = false) bilinear resize.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w);
template <typename T>
Tensor<T> resize_bilinear_backward(const Shape& input_shape,
                                   const Tensor<T>& grad_output);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Removes `margin` pixels from every border.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& input, int margin);
template <typename T>
Tensor<T> center_crop_backward(const Shape& input_shape, int margin,
                               const Tensor<T>& grad_output);

/// Surrounds every plane with `pad` zero pixels. Only used to build padded
/// control networks; no layer of the interpretable model pads.
template <typename T>
Tensor<T> zero_pad(const Tensor<T>& input, int pad);
template <typename T>
Tensor<T> zero_pad_backward(const Shape& input_shape, int pad,
                            const Tensor<T>& grad_output);

/// Crops rows [top, top + h) and columns [left, left + w) of every plane.
template <typename T>
Tensor<T> crop(const Tensor<T>& input, int top, int left, int h, int w);

}  // namespace kernels
}  // namespace anchornet
