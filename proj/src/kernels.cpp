#include "anchornet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace anchornet::kernels {

Shape conv_output_shape(const Shape& input, const Shape& weights,
                        Stride stride, int groups) {
  if (stride.h < 1 || stride.w < 1) {
    throw ShapeError("convolution stride must be >= 1");
  }
  if (groups < 1 || input.c % groups != 0 || weights.n % groups != 0) {
    throw ShapeError("groups must divide input and output channels (in " +
                     std::to_string(input.c) + ", out " +
                     std::to_string(weights.n) + ", groups " +
                     std::to_string(groups) + ")");
  }
  if (weights.c * groups != input.c) {
    throw ShapeError("kernel expects " + std::to_string(weights.c * groups) +
                     " input channels, got " + std::to_string(input.c));
  }
  if (weights.h > input.h || weights.w > input.w) {
    throw ShapeError("kernel " + std::to_string(weights.h) + "x" +
                     std::to_string(weights.w) + " larger than input " +
                     std::to_string(input.h) + "x" + std::to_string(input.w));
  }
  return {input.n, weights.n, (input.h - weights.h) / stride.h + 1,
          (input.w - weights.w) / stride.w + 1};
}

namespace {

// C[m][p] += sum_k A(m, k) * B[k][p] for m in [m0, m1). A(m, k) is read
// at a[m * a_rs + k * a_cs], so a transposed A costs nothing extra. The
// sum over k runs in index order into a per-block accumulator.
template <typename T>
void gemm_acc(int m0, int m1, int K, std::size_t P, const T* a, std::size_t a_rs,
              std::size_t a_cs, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr int kRows = 8;
  constexpr std::size_t kCols = 256;
  alignas(64) T acc[kRows][kCols];
  for (std::size_t p0 = 0; p0 < P; p0 += kCols) {
    const std::size_t pn = std::min(kCols, P - p0);
    for (int mb = m0; mb < m1; mb += kRows) {
      const int mn = std::min(kRows, m1 - mb);
      for (int m = 0; m < mn; ++m) std::fill_n(acc[m], pn, T(0));
      for (int k = 0; k < K; ++k) {
        const T* brow = b + static_cast<std::size_t>(k) * ldb + p0;
        for (int m = 0; m < mn; ++m) {
          const T av = a[static_cast<std::size_t>(mb + m) * a_rs + static_cast<std::size_t>(k) * a_cs];
          T* row = acc[m];
#pragma omp simd
          for (std::size_t p = 0; p < pn; ++p) row[p] += av * brow[p];
        }
      }
      for (int m = 0; m < mn; ++m) {
        T* crow = c + static_cast<std::size_t>(mb + m) * ldc + p0;
        for (std::size_t p = 0; p < pn; ++p) crow[p] += acc[m][p];
      }
    }
  }
}

// C[m][j] += sum_p A[m][p] * B[j][p] for m in [m0, m1), j in [0, N).
// Each (m, j) pair keeps kLanes partial sums that are folded in a fixed
// order at the end.
template <typename T>
void gemm_nt_acc(int m0, int m1, int N, std::size_t P, const T* a, std::size_t lda,
                 const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr int kTile = 4;
  constexpr std::size_t kLanes = 16;
  const std::size_t full = P - P % kLanes;
  for (int mb = m0; mb < m1; mb += kTile) {
    const int mn = std::min(kTile, m1 - mb);
    for (int jb = 0; jb < N; jb += kTile) {
      const int jn = std::min(kTile, N - jb);
      alignas(64) T acc[kTile][kTile][kLanes] = {};
      for (std::size_t p = 0; p < full; p += kLanes) {
        for (int m = 0; m < mn; ++m) {
          const T* arow = a + static_cast<std::size_t>(mb + m) * lda + p;
          for (int j = 0; j < jn; ++j) {
            const T* brow = b + static_cast<std::size_t>(jb + j) * ldb + p;
            T* lane = acc[m][j];
#pragma omp simd
            for (std::size_t l = 0; l < kLanes; ++l) lane[l] += arow[l] * brow[l];
          }
        }
      }
      for (int m = 0; m < mn; ++m) {
        const T* arow = a + static_cast<std::size_t>(mb + m) * lda;
        for (int j = 0; j < jn; ++j) {
          const T* brow = b + static_cast<std::size_t>(jb + j) * ldb;
          T tail = 0;
          for (std::size_t p = full; p < P; ++p) tail += arow[p] * brow[p];
          T sum = 0;
          for (std::size_t l = 0; l < kLanes; ++l) sum += acc[m][j][l];
          c[static_cast<std::size_t>(mb + m) * ldc + jb + j] += sum + tail;
        }
      }
    }
  }
}

// Unfolds one image (C, H, W) into rows (c, r, s) by output position.
template <typename T>
void im2col(const T* in, const Shape& is, int kh, int kw, Stride st, int oh_n, int ow_n,
            T* col) {
  const std::size_t P = static_cast<std::size_t>(oh_n) * ow_n;
  for (int c = 0; c < is.c; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * is.h * is.w;
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s) {
        T* row = col + (static_cast<std::size_t>(c * kh + r) * kw + s) * P;
        for (int oh = 0; oh < oh_n; ++oh) {
          const T* irow = plane + static_cast<std::size_t>(oh * st.h + r) * is.w + s;
          T* orow = row + static_cast<std::size_t>(oh) * ow_n;
          if (st.w == 1) {
            std::copy_n(irow, ow_n, orow);
          } else {
            for (int ow = 0; ow < ow_n; ++ow) orow[ow] = irow[ow * st.w];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds rows back into the image gradient.
template <typename T>
void col2im(const T* col, const Shape& is, int kh, int kw, Stride st, int oh_n, int ow_n,
            T* out) {
  const std::size_t P = static_cast<std::size_t>(oh_n) * ow_n;
  for (int c = 0; c < is.c; ++c) {
    T* plane = out + static_cast<std::size_t>(c) * is.h * is.w;
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s) {
        const T* row = col + (static_cast<std::size_t>(c * kh + r) * kw + s) * P;
        for (int oh = 0; oh < oh_n; ++oh) {
          T* irow = plane + static_cast<std::size_t>(oh * st.h + r) * is.w + s;
          const T* orow = row + static_cast<std::size_t>(oh) * ow_n;
          if (st.w == 1) {
            for (int ow = 0; ow < ow_n; ++ow) irow[ow] += orow[ow];
          } else {
            for (int ow = 0; ow < ow_n; ++ow) irow[ow * st.w] += orow[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Shape& ws, Stride st) {
  return ws.h == 1 && ws.w == 1 && st.h == 1 && st.w == 1;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  const Shape is = input.shape();
  const Shape ws = kernel.weights.shape();
  const Shape os = conv_output_shape(is, ws, kernel.stride, kernel.groups);
  Tensor<T> out(os);

  const int icpg = ws.c;
  const int ocpg = os.c / kernel.groups;
  const int kh = ws.h, kw = ws.w;
  const int sh = kernel.stride.h, sw = kernel.stride.w;
  const T* wdata = kernel.weights.raw();
  const std::size_t P = os.plane();

  if (kernel.groups == 1) {
    // Dense: out[n] (O x P) = W (O x I*kh*kw) * cols (I*kh*kw x P).
    const bool pointwise = is_pointwise(ws, kernel.stride);
    const int K = icpg * kh * kw;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < os.n; ++n) {
      std::vector<T> cols;
      const T* b = input.plane(n, 0);
      if (!pointwise) {
        cols.resize(static_cast<std::size_t>(K) * P);
        im2col(b, is, kh, kw, kernel.stride, os.h, os.w, cols.data());
        b = cols.data();
      }
      gemm_acc(0, os.c, K, P, wdata, static_cast<std::size_t>(K), std::size_t{1}, b, P,
               out.plane(n, 0), P);
    }
    return out;
  }

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < os.n; ++n) {
    for (int oc = 0; oc < os.c; ++oc) {
      const int g = oc / ocpg;
      T* o = out.plane(n, oc);
      for (int icg = 0; icg < icpg; ++icg) {
        const T* in = input.plane(n, g * icpg + icg);
        const T* wp = wdata + (static_cast<std::size_t>(oc) * icpg + icg) * kh * kw;
        for (int r = 0; r < kh; ++r) {
          for (int s = 0; s < kw; ++s) {
            const T wv = wp[r * kw + s];
            for (int oh = 0; oh < os.h; ++oh) {
              const T* irow = in + static_cast<std::size_t>(oh * sh + r) * is.w + s;
              T* orow = o + static_cast<std::size_t>(oh) * os.w;
              if (sw == 1) {
#pragma omp simd
                for (int ow = 0; ow < os.w; ++ow) orow[ow] += wv * irow[ow];
              } else {
                for (int ow = 0; ow < os.w; ++ow) orow[ow] += wv * irow[ow * sw];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_valid_backward(const Tensor<T>& input, const ConvKernel<T>& kernel,
                           const Tensor<T>& grad_output, Tensor<T>* grad_input,
                           Tensor<T>* grad_weights) {
  const Shape is = input.shape();
  const Shape ws = kernel.weights.shape();
  const Shape os = conv_output_shape(is, ws, kernel.stride, kernel.groups);
  if (grad_output.shape() != os) {
    throw ShapeError("conv backward: grad shape " + grad_output.shape().str() +
                     " != output shape " + os.str());
  }
  const int icpg = ws.c;
  const int ocpg = os.c / kernel.groups;
  const int kh = ws.h, kw = ws.w;
  const int sh = kernel.stride.h, sw = kernel.stride.w;
  const T* wdata = kernel.weights.raw();
  const std::size_t P = os.plane();

  if (kernel.groups == 1) {
    const bool pointwise = is_pointwise(ws, kernel.stride);
    const int K = icpg * kh * kw;
    if (grad_input != nullptr) {
      *grad_input = Tensor<T>(is);
#pragma omp parallel for schedule(static)
      for (int n = 0; n < is.n; ++n) {
        // cols_grad (K x P) = W^T (K x O) * grad_out (O x P)
        if (pointwise) {
          gemm_acc(0, K, os.c, P, wdata, std::size_t{1}, static_cast<std::size_t>(K),
                   grad_output.plane(n, 0), P, grad_input->plane(n, 0), P);
        } else {
          std::vector<T> cols(static_cast<std::size_t>(K) * P, T(0));
          gemm_acc(0, K, os.c, P, wdata, std::size_t{1}, static_cast<std::size_t>(K),
                   grad_output.plane(n, 0), P, cols.data(), P);
          col2im(cols.data(), is, kh, kw, kernel.stride, os.h, os.w, grad_input->plane(n, 0));
        }
      }
    }
    if (grad_weights != nullptr) {
      *grad_weights = Tensor<T>(ws);
      // Unfold every image once; the weight gradient sums over the batch.
      std::vector<T> cols;
      if (!pointwise) {
        cols.resize(static_cast<std::size_t>(is.n) * K * P);
#pragma omp parallel for schedule(static)
        for (int n = 0; n < is.n; ++n) {
          im2col(input.plane(n, 0), is, kh, kw, kernel.stride, os.h, os.w,
                 cols.data() + static_cast<std::size_t>(n) * K * P);
        }
      }
      constexpr int kBlock = 4;
      const int blocks = (os.c + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
      for (int blk = 0; blk < blocks; ++blk) {
        const int m0 = blk * kBlock;
        const int m1 = std::min(os.c, m0 + kBlock);
        for (int n = 0; n < is.n; ++n) {
          const T* b = pointwise ? input.plane(n, 0)
                                 : cols.data() + static_cast<std::size_t>(n) * K * P;
          gemm_nt_acc(m0, m1, K, P, grad_output.plane(n, 0), P, b, P, grad_weights->raw(),
                      static_cast<std::size_t>(K));
        }
      }
    }
    return;
  }

  if (grad_input != nullptr) {
    *grad_input = Tensor<T>(is);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < is.n; ++n) {
      for (int ic = 0; ic < is.c; ++ic) {
        const int g = ic / icpg;
        const int icg = ic % icpg;
        T* gi = grad_input->plane(n, ic);
        for (int oc = g * ocpg; oc < (g + 1) * ocpg; ++oc) {
          const T* go = grad_output.plane(n, oc);
          const T* wp = wdata + (static_cast<std::size_t>(oc) * icpg + icg) * kh * kw;
          for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s) {
              const T wv = wp[r * kw + s];
              for (int oh = 0; oh < os.h; ++oh) {
                T* girow = gi + static_cast<std::size_t>(oh * sh + r) * is.w + s;
                const T* gorow = go + static_cast<std::size_t>(oh) * os.w;
                if (sw == 1) {
#pragma omp simd
                  for (int ow = 0; ow < os.w; ++ow) girow[ow] += wv * gorow[ow];
                } else {
                  for (int ow = 0; ow < os.w; ++ow) girow[ow * sw] += wv * gorow[ow];
                }
              }
            }
          }
        }
      }
    }
  }

  if (grad_weights != nullptr) {
    *grad_weights = Tensor<T>(ws);
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < os.c; ++oc) {
      const int g = oc / ocpg;
      for (int icg = 0; icg < icpg; ++icg) {
        T* gw = grad_weights->raw() + (static_cast<std::size_t>(oc) * icpg + icg) * kh * kw;
        for (int n = 0; n < os.n; ++n) {
          const T* go = grad_output.plane(n, oc);
          const T* in = input.plane(n, g * icpg + icg);
          for (int r = 0; r < kh; ++r) {
            for (int s = 0; s < kw; ++s) {
              T acc = 0;
              for (int oh = 0; oh < os.h; ++oh) {
                const T* irow = in + static_cast<std::size_t>(oh * sh + r) * is.w + s;
                const T* gorow = go + static_cast<std::size_t>(oh) * os.w;
                if (sw == 1) {
#pragma omp simd reduction(+ : acc)
                  for (int ow = 0; ow < os.w; ++ow) acc += gorow[ow] * irow[ow];
                } else {
#pragma omp simd reduction(+ : acc)
                  for (int ow = 0; ow < os.w; ++ow) acc += gorow[ow] * irow[ow * sw];
                }
              }
              gw[r * kw + s] += acc;
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> gap(const Tensor<T>& input) {
  const Shape s = input.shape();
  Tensor<T> out({s.n, s.c, 1, 1});
  const std::size_t count = s.plane();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < count; ++i) acc += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(count));
    }
  }
  return out;
}

template <typename T>
Tensor<T> gap_backward(const Shape& input_shape, const Tensor<T>& grad_output) {
  Tensor<T> grad(input_shape);
  const std::size_t count = input_shape.plane();
  const T scale = T(1) / static_cast<T>(count);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < input_shape.n; ++n) {
    for (int c = 0; c < input_shape.c; ++c) {
      const T g = grad_output.at(n, c, 0, 0) * scale;
      std::fill_n(grad.plane(n, c), count, g);
    }
  }
  return grad;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& features, const Tensor<T>& weights,
                 const Tensor<T>* bias) {
  const Shape fs = features.shape();
  const Shape ws = weights.shape();
  const int in_width = fs.c * fs.h * fs.w;
  if (ws.c * ws.h * ws.w != in_width) {
    throw ShapeError("linear: feature length " + std::to_string(in_width) +
                     " != weight columns " + std::to_string(ws.c * ws.h * ws.w));
  }
  if (bias != nullptr && static_cast<int>(bias->size()) != ws.n) {
    throw ShapeError("linear: bias length mismatch");
  }
  Tensor<T> out({fs.n, ws.n, 1, 1});
  for (int n = 0; n < fs.n; ++n) {
    const T* f = features.raw() + static_cast<std::size_t>(n) * in_width;
    for (int k = 0; k < ws.n; ++k) {
      const T* w = weights.raw() + static_cast<std::size_t>(k) * in_width;
      T acc = bias != nullptr ? (*bias)[k] : T(0);
      for (int c = 0; c < in_width; ++c) acc += w[c] * f[c];
      out.at(n, k, 0, 0) = acc;
    }
  }
  return out;
}

template <typename T>
void linear_backward(const Tensor<T>& features, const Tensor<T>& weights,
                     const Tensor<T>& grad_output, Tensor<T>* grad_features,
                     Tensor<T>* grad_weights, Tensor<T>* grad_bias) {
  const Shape fs = features.shape();
  const Shape ws = weights.shape();
  const int in_width = fs.c * fs.h * fs.w;
  if (grad_features != nullptr) {
    *grad_features = Tensor<T>(fs);
    for (int n = 0; n < fs.n; ++n) {
      T* gf = grad_features->raw() + static_cast<std::size_t>(n) * in_width;
      for (int k = 0; k < ws.n; ++k) {
        const T g = grad_output.at(n, k, 0, 0);
        const T* w = weights.raw() + static_cast<std::size_t>(k) * in_width;
        for (int c = 0; c < in_width; ++c) gf[c] += g * w[c];
      }
    }
  }
  if (grad_weights != nullptr) {
    *grad_weights = Tensor<T>(ws);
    for (int k = 0; k < ws.n; ++k) {
      T* gw = grad_weights->raw() + static_cast<std::size_t>(k) * in_width;
      for (int n = 0; n < fs.n; ++n) {
        const T g = grad_output.at(n, k, 0, 0);
        const T* f = features.raw() + static_cast<std::size_t>(n) * in_width;
        for (int c = 0; c < in_width; ++c) gw[c] += g * f[c];
      }
    }
  }
  if (grad_bias != nullptr) {
    *grad_bias = Tensor<T>({ws.n, 1, 1, 1});
    for (int n = 0; n < fs.n; ++n) {
      for (int k = 0; k < ws.n; ++k) (*grad_bias)[k] += grad_output.at(n, k, 0, 0);
    }
  }
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  const int width = s.c * s.h * s.w;
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    std::span<const T> row(logits.raw() + static_cast<std::size_t>(n) * width, width);
    const auto probs = softmax<T>(row);
    std::copy(probs.begin(), probs.end(), out.raw() + static_cast<std::size_t>(n) * width);
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const std::size_t count = input.size();
  const T* x = input.raw();
  T* y = out.raw();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < count; ++i) {
    y[i] = x[i] / (T(1) + std::exp(-x[i]));
  }
  return out;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& input, const Tensor<T>& grad_output) {
  Tensor<T> grad(input.shape());
  const std::size_t count = input.size();
  const T* x = input.raw();
  const T* go = grad_output.raw();
  T* gi = grad.raw();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < count; ++i) {
    const T sig = T(1) / (T(1) + std::exp(-x[i]));
    gi[i] = go[i] * sig * (T(1) + x[i] * (T(1) - sig));
  }
  return grad;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const BatchNormParams<T>& params,
                    NormMode mode, BatchNormCache<T>* cache) {
  const Shape s = input.shape();
  const std::size_t channels = static_cast<std::size_t>(s.c);
  if (params.gamma.size() != channels || params.beta.size() != channels) {
    throw ShapeError("batchnorm: affine parameters do not match " +
                     std::to_string(s.c) + " channels");
  }
  const bool have_stats = params.running_mean.size() == channels &&
                          params.running_var.size() == channels;
  if (mode == NormMode::kInfer && !have_stats) {
    throw StateError("batchnorm: inference mode requires running statistics");
  }
  Tensor<T> out(s);
  std::vector<T> mean(channels), inv_std(channels);
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(plane) * s.n;

#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    double mu, var;
    if (mode == NormMode::kTrain) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mu = sum / count;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / count;
      if (have_stats) {
        const double unbiased = count > 1 ? sq / (count - 1) : var;
        params.running_mean[c] = static_cast<T>(
            (1 - params.momentum) * params.running_mean[c] + params.momentum * mu);
        params.running_var[c] = static_cast<T>(
            (1 - params.momentum) * params.running_var[c] + params.momentum * unbiased);
      }
    } else {
      mu = params.running_mean[c];
      var = params.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + params.eps);
    mean[c] = static_cast<T>(mu);
    inv_std[c] = static_cast<T>(istd);
    const T scale = static_cast<T>(params.gamma[c] * istd);
    const T shift = static_cast<T>(params.beta[c] - params.gamma[c] * istd * mu);
    for (int n = 0; n < s.n; ++n) {
      const T* p = input.plane(n, c);
      T* q = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * scale + shift;
    }
  }
  if (cache != nullptr) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& input,
                        const BatchNormParams<T>& params, NormMode mode,
                        const BatchNormCache<T>& cache,
                        const Tensor<T>& grad_output, Tensor<T>* grad_input,
                        std::span<T> grad_gamma, std::span<T> grad_beta) {
  const Shape s = input.shape();
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(plane) * s.n;
  if (grad_input != nullptr) *grad_input = Tensor<T>(s);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    const double mu = cache.mean[c];
    const double istd = cache.inv_std[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const T* x = input.plane(n, c);
      const T* dy = grad_output.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * (x[i] - mu) * istd;
      }
    }
    if (!grad_gamma.empty()) grad_gamma[c] += static_cast<T>(sum_dy_xhat);
    if (!grad_beta.empty()) grad_beta[c] += static_cast<T>(sum_dy);
    if (grad_input == nullptr) continue;
    const double g = params.gamma[c];
    for (int n = 0; n < s.n; ++n) {
      const T* x = input.plane(n, c);
      const T* dy = grad_output.plane(n, c);
      T* dx = grad_input->plane(n, c);
      if (mode == NormMode::kTrain) {
        const double k = g * istd / count;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (x[i] - mu) * istd;
          dx[i] = static_cast<T>(k * (count * dy[i] - sum_dy - xhat * sum_dy_xhat));
        }
      } else {
        const T k = static_cast<T>(g * istd);
        for (std::size_t i = 0; i < plane; ++i) dx[i] = k * dy[i];
      }
    }
  }
}

namespace {

struct AxisSample {
  int lo;
  int hi;
  double frac;
};

std::vector<AxisSample> bilinear_axis(int in, int out) {
  std::vector<AxisSample> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    const int hi = lo < in - 1 ? lo + 1 : lo;
    taps[i] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("resize target must be at least 1x1");
  }
  const Shape s = input.shape();
  Tensor<T> out({s.n, s.c, out_h, out_w});
  const auto ys = bilinear_axis(s.h, out_h);
  const auto xs = bilinear_axis(s.w, out_w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      T* q = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const auto& ty = ys[y];
        const T* r0 = p + static_cast<std::size_t>(ty.lo) * s.w;
        const T* r1 = p + static_cast<std::size_t>(ty.hi) * s.w;
        const T fy = static_cast<T>(ty.frac);
        for (int x = 0; x < out_w; ++x) {
          const auto& tx = xs[x];
          const T fx = static_cast<T>(tx.frac);
          const T top = r0[tx.lo] * (T(1) - fx) + r0[tx.hi] * fx;
          const T bottom = r1[tx.lo] * (T(1) - fx) + r1[tx.hi] * fx;
          q[static_cast<std::size_t>(y) * out_w + x] = top * (T(1) - fy) + bottom * fy;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Shape& input_shape,
                                   const Tensor<T>& grad_output) {
  const Shape os = grad_output.shape();
  Tensor<T> grad(input_shape);
  const auto ys = bilinear_axis(input_shape.h, os.h);
  const auto xs = bilinear_axis(input_shape.w, os.w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      T* p = grad.plane(n, c);
      const T* q = grad_output.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        const auto& ty = ys[y];
        T* r0 = p + static_cast<std::size_t>(ty.lo) * input_shape.w;
        T* r1 = p + static_cast<std::size_t>(ty.hi) * input_shape.w;
        const T fy = static_cast<T>(ty.frac);
        for (int x = 0; x < os.w; ++x) {
          const auto& tx = xs[x];
          const T fx = static_cast<T>(tx.frac);
          const T g = q[static_cast<std::size_t>(y) * os.w + x];
          r0[tx.lo] += g * (T(1) - fy) * (T(1) - fx);
          r0[tx.hi] += g * (T(1) - fy) * fx;
          r1[tx.lo] += g * fy * (T(1) - fx);
          r1[tx.hi] += g * fy * fx;
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape " + a.shape().str() + " != " + b.shape().str());
  }
  Tensor<T> out(a.shape());
  const std::size_t count = a.size();
  for (std::size_t i = 0; i < count; ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& input, int top, int left, int h, int w) {
  const Shape s = input.shape();
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > s.h || left + w > s.w) {
    throw RangeError("crop window (" + std::to_string(top) + "," +
                     std::to_string(left) + "," + std::to_string(h) + "," +
                     std::to_string(w) + ") outside " + s.str());
  }
  Tensor<T> out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      T* q = out.plane(n, c);
      for (int y = 0; y < h; ++y) {
        std::memcpy(q + static_cast<std::size_t>(y) * w,
                    p + static_cast<std::size_t>(top + y) * s.w + left,
                    sizeof(T) * w);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> center_crop(const Tensor<T>& input, int margin) {
  const Shape s = input.shape();
  if (margin < 0 || 2 * margin >= s.h || 2 * margin >= s.w) {
    throw ShapeError("center_crop margin " + std::to_string(margin) +
                     " too large for " + s.str());
  }
  return crop(input, margin, margin, s.h - 2 * margin, s.w - 2 * margin);
}

template <typename T>
Tensor<T> center_crop_backward(const Shape& input_shape, int margin,
                               const Tensor<T>& grad_output) {
  Tensor<T> grad(input_shape);
  const Shape os = grad_output.shape();
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      T* p = grad.plane(n, c);
      const T* q = grad_output.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        std::memcpy(p + static_cast<std::size_t>(y + margin) * input_shape.w + margin,
                    q + static_cast<std::size_t>(y) * os.w, sizeof(T) * os.w);
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& input, int pad) {
  if (pad < 0) throw ShapeError("negative padding");
  const Shape s = input.shape();
  Tensor<T> out({s.n, s.c, s.h + 2 * pad, s.w + 2 * pad});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      T* q = out.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        std::memcpy(q + static_cast<std::size_t>(y + pad) * (s.w + 2 * pad) + pad,
                    p + static_cast<std::size_t>(y) * s.w, sizeof(T) * s.w);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> zero_pad_backward(const Shape& input_shape, int pad,
                            const Tensor<T>& grad_output) {
  return crop(grad_output, pad, pad, input_shape.h, input_shape.w);
}

#define ANCHORNET_INSTANTIATE(T)                                               \
  template Tensor<T> conv2d_valid(const Tensor<T>&, const ConvKernel<T>&);     \
  template void conv2d_valid_backward(const Tensor<T>&, const ConvKernel<T>&,  \
                                      const Tensor<T>&, Tensor<T>*,            \
                                      Tensor<T>*);                             \
  template Tensor<T> gap(const Tensor<T>&);                                    \
  template Tensor<T> gap_backward(const Shape&, const Tensor<T>&);             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,                \
                            const Tensor<T>*);                                 \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, Tensor<T>*, Tensor<T>*,      \
                                Tensor<T>*);                                   \
  template std::vector<T> softmax(std::span<const T>);                         \
  template Tensor<T> softmax_rows(const Tensor<T>&);                           \
  template Tensor<T> silu(const Tensor<T>&);                                   \
  template Tensor<T> silu_backward(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> batchnorm(const Tensor<T>&, const BatchNormParams<T>&,    \
                               NormMode, BatchNormCache<T>*);                  \
  template void batchnorm_backward(const Tensor<T>&, const BatchNormParams<T>&, \
                                   NormMode, const BatchNormCache<T>&,         \
                                   const Tensor<T>&, Tensor<T>*, std::span<T>, \
                                   std::span<T>);                              \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);              \
  template Tensor<T> resize_bilinear_backward(const Shape&, const Tensor<T>&); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> crop(const Tensor<T>&, int, int, int, int);               \
  template Tensor<T> center_crop(const Tensor<T>&, int);                       \
  template Tensor<T> center_crop_backward(const Shape&, int, const Tensor<T>&); \
  template Tensor<T> zero_pad(const Tensor<T>&, int);                          \
  template Tensor<T> zero_pad_backward(const Shape&, int, const Tensor<T>&);

ANCHORNET_INSTANTIATE(float)
ANCHORNET_INSTANTIATE(double)

#undef ANCHORNET_INSTANTIATE

}  // namespace anchornet::kernels
