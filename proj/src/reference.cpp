#include "anchornet/reference.hpp"

#include <algorithm>
#include <cmath>

namespace anchornet::reference {

template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  const Shape is = input.shape();
  const Shape ws = kernel.weights.shape();
  const Shape os =
      kernels::conv_output_shape(is, ws, kernel.stride, kernel.groups);
  const int ocpg = os.c / kernel.groups;
  Tensor<T> out(os);
  for (int n = 0; n < os.n; ++n) {
    for (int oc = 0; oc < os.c; ++oc) {
      const int g = oc / ocpg;
      for (int i = 0; i < os.h; ++i) {
        for (int j = 0; j < os.w; ++j) {
          double acc = 0.0;
          for (int ic = 0; ic < ws.c; ++ic) {
            for (int r = 0; r < ws.h; ++r) {
              for (int s = 0; s < ws.w; ++s) {
                acc += static_cast<double>(kernel.weights.at(oc, ic, r, s)) *
                       input.at(n, g * ws.c + ic, i * kernel.stride.h + r,
                                j * kernel.stride.w + s);
              }
            }
          }
          out.at(n, oc, i, j) = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> gap(const Tensor<T>& input) {
  const Shape s = input.shape();
  Tensor<T> out({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) acc += input.at(n, c, y, x);
      }
      out.at(n, c, 0, 0) = static_cast<T>(acc / (s.h * s.w));
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& input, std::span<const T> gamma,
                          std::span<const T> beta, double eps) {
  const Shape s = input.shape();
  Tensor<T> out(s);
  const double count = static_cast<double>(s.n) * s.h * s.w;
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) mean += input.at(n, c, y, x);
    mean /= count;
    double var = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const double d = input.at(n, c, y, x) - mean;
          var += d * d;
        }
    var /= count;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const double xhat = (input.at(n, c, y, x) - mean) / std::sqrt(var + eps);
          out.at(n, c, y, x) = static_cast<T>(gamma[c] * xhat + beta[c]);
        }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w) {
  const Shape s = input.shape();
  Tensor<T> out({s.n, s.c, out_h, out_w});
  auto source = [](int dst, int in, int outn) {
    const double v = (dst + 0.5) * static_cast<double>(in) / outn - 0.5;
    return std::clamp(v, 0.0, static_cast<double>(in - 1));
  };
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < out_h; ++y) {
        const double sy = source(y, s.h, out_h);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, s.h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < out_w; ++x) {
          const double sx = source(x, s.w, out_w);
          const int x0 = static_cast<int>(std::floor(sx));
          const int x1 = std::min(x0 + 1, s.w - 1);
          const double fx = sx - x0;
          const double v = (1 - fy) * ((1 - fx) * input.at(n, c, y0, x0) +
                                       fx * input.at(n, c, y0, x1)) +
                           fy * ((1 - fx) * input.at(n, c, y1, x0) +
                                 fx * input.at(n, c, y1, x1));
          out.at(n, c, y, x) = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

template Tensor<float> conv2d_valid(const Tensor<float>&, const ConvKernel<float>&);
template Tensor<double> conv2d_valid(const Tensor<double>&, const ConvKernel<double>&);
template Tensor<float> gap(const Tensor<float>&);
template Tensor<double> gap(const Tensor<double>&);
template Tensor<float> batchnorm_train(const Tensor<float>&, std::span<const float>,
                                       std::span<const float>, double);
template Tensor<double> batchnorm_train(const Tensor<double>&, std::span<const double>,
                                        std::span<const double>, double);
template Tensor<float> resize_bilinear(const Tensor<float>&, int, int);
template Tensor<double> resize_bilinear(const Tensor<double>&, int, int);

}  // namespace anchornet::reference
