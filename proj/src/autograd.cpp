#include "anchornet/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace anchornet {

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw StateError("variable is not recorded on this tape");
  }
  return nodes_[v.id];
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool needs_grad,
                  std::function<void(Tape&, const Tensor<T>&)> vjp) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::accumulate(Var v, Tensor<T> g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = std::move(g);
    n.has_grad = true;
    return;
  }
  if (n.grad.shape() != g.shape()) {
    throw ShapeError("gradient shape mismatch during accumulation");
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

template <typename T>
Var Tape<T>::input(Tensor<T> value) {
  const bool track = value.requires_grad();
  return push(std::move(value), track, nullptr);
}

template <typename T>
Var Tape<T>::param(Parameter<T>& p) {
  Var v = push(p.value, true, nullptr);
  nodes_.back().param = &p;
  return v;
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor<T>(n.value.shape());
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var weights, Stride stride, int groups) {
  ConvKernel<T> k{value(weights), stride, groups};
  Tensor<T> out = kernels::conv2d_valid(value(x), k);
  return push(std::move(out), needs(x) || needs(weights),
              [x, weights, stride, groups](Tape& t, const Tensor<T>& g) {
                ConvKernel<T> kk{t.value(weights), stride, groups};
                Tensor<T> gi, gw;
                kernels::conv2d_valid_backward(t.value(x), kk, g,
                                               t.needs(x) ? &gi : nullptr,
                                               t.needs(weights) ? &gw : nullptr);
                if (t.needs(x)) t.accumulate(x, std::move(gi));
                if (t.needs(weights)) t.accumulate(weights, std::move(gw));
              });
}

template <typename T>
Var Tape<T>::batchnorm(Var x, Var gamma, Var beta, std::span<T> running_mean,
                       std::span<T> running_var, NormMode mode) {
  BatchNormParams<T> params{value(gamma).data(), value(beta).data(),
                            running_mean, running_var};
  BatchNormCache<T> cache;
  Tensor<T> out = kernels::batchnorm(value(x), params, mode, &cache);
  return push(std::move(out), needs(x) || needs(gamma) || needs(beta),
              [x, gamma, beta, running_mean, running_var, mode,
               cache = std::move(cache)](Tape& t, const Tensor<T>& g) {
                BatchNormParams<T> p{t.value(gamma).data(), t.value(beta).data(),
                                     running_mean, running_var};
                const int channels = t.value(x).shape().c;
                Tensor<T> gg({channels, 1, 1, 1}), gb({channels, 1, 1, 1});
                Tensor<T> gi;
                kernels::batchnorm_backward(t.value(x), p, mode, cache, g,
                                            t.needs(x) ? &gi : nullptr,
                                            gg.data(), gb.data());
                if (t.needs(x)) t.accumulate(x, std::move(gi));
                if (t.needs(gamma)) {
                  t.accumulate(gamma, gg.reshaped(t.value(gamma).shape()));
                }
                if (t.needs(beta)) {
                  t.accumulate(beta, gb.reshaped(t.value(beta).shape()));
                }
              });
}

template <typename T>
Var Tape<T>::silu(Var x) {
  return push(kernels::silu(value(x)), needs(x),
              [x](Tape& t, const Tensor<T>& g) {
                t.accumulate(x, kernels::silu_backward(t.value(x), g));
              });
}

template <typename T>
Var Tape<T>::gap(Var x) {
  return push(kernels::gap(value(x)), needs(x),
              [x](Tape& t, const Tensor<T>& g) {
                t.accumulate(x, kernels::gap_backward(t.value(x).shape(), g));
              });
}

template <typename T>
Var Tape<T>::linear(Var x, Var weights, std::optional<Var> bias) {
  const Tensor<T>* b = bias ? &value(*bias) : nullptr;
  Tensor<T> out = kernels::linear(value(x), value(weights), b);
  const bool track = needs(x) || needs(weights) || (bias && needs(*bias));
  return push(std::move(out), track,
              [x, weights, bias](Tape& t, const Tensor<T>& g) {
                Tensor<T> gx, gw, gb;
                const bool want_b = bias && t.needs(*bias);
                kernels::linear_backward(t.value(x), t.value(weights), g,
                                         t.needs(x) ? &gx : nullptr,
                                         t.needs(weights) ? &gw : nullptr,
                                         want_b ? &gb : nullptr);
                if (t.needs(x)) t.accumulate(x, std::move(gx));
                if (t.needs(weights)) t.accumulate(weights, std::move(gw));
                if (want_b) t.accumulate(*bias, gb.reshaped(t.value(*bias).shape()));
              });
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  return push(kernels::add(value(a), value(b)), needs(a) || needs(b),
              [a, b](Tape& t, const Tensor<T>& g) {
                if (t.needs(a)) t.accumulate(a, g);
                if (t.needs(b)) t.accumulate(b, g);
              });
}

template <typename T>
Var Tape<T>::center_crop(Var x, int margin) {
  return push(kernels::center_crop(value(x), margin), needs(x),
              [x, margin](Tape& t, const Tensor<T>& g) {
                t.accumulate(x, kernels::center_crop_backward(t.value(x).shape(),
                                                              margin, g));
              });
}

template <typename T>
Var Tape<T>::zero_pad(Var x, int pad) {
  return push(kernels::zero_pad(value(x), pad), needs(x),
              [x, pad](Tape& t, const Tensor<T>& g) {
                t.accumulate(x, kernels::zero_pad_backward(t.value(x).shape(), pad, g));
              });
}

template <typename T>
Var Tape<T>::resize_bilinear(Var x, int out_h, int out_w) {
  return push(kernels::resize_bilinear(value(x), out_h, out_w), needs(x),
              [x](Tape& t, const Tensor<T>& g) {
                t.accumulate(x, kernels::resize_bilinear_backward(t.value(x).shape(), g));
              });
}

template <typename T>
Var Tape<T>::softmax_cross_entropy(Var logits, std::span<const int> labels,
                                   std::span<const T> weights) {
  const Tensor<T>& z = value(logits);
  const Shape s = z.shape();
  const int classes = s.c * s.h * s.w;
  if (static_cast<int>(labels.size()) != s.n ||
      static_cast<int>(weights.size()) != s.n) {
    throw ShapeError("cross entropy: labels/weights must have one entry per row");
  }
  Tensor<T> probs = kernels::softmax_rows(z);
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    if (labels[n] < 0 || labels[n] >= classes) {
      throw RangeError("cross entropy: label out of range");
    }
    const double p = std::max<double>(probs[static_cast<std::size_t>(n) * classes + labels[n]], 1e-12);
    loss -= weights[n] * std::log(p);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<T> wts(weights.begin(), weights.end());
  return push(Tensor<T>({1, 1, 1, 1}, static_cast<T>(loss)), needs(logits),
              [logits, classes, lab = std::move(lab), wts = std::move(wts),
               probs = std::move(probs)](Tape& t, const Tensor<T>& g) {
                Tensor<T> gz(probs.shape());
                const T seed = g[0];
                for (std::size_t n = 0; n < lab.size(); ++n) {
                  for (int k = 0; k < classes; ++k) {
                    const std::size_t i = n * classes + k;
                    gz[i] = seed * wts[n] * (probs[i] - (k == lab[n] ? T(1) : T(0)));
                  }
                }
                t.accumulate(logits, std::move(gz));
              });
}

template <typename T>
void Tape<T>::backward(Var root) {
  const Node& n = node(root);
  if (n.value.size() != 1) {
    throw ShapeError("backward without a seed requires a scalar root");
  }
  backward(root, Tensor<T>(n.value.shape(), T(1)));
}

template <typename T>
void Tape<T>::backward(Var root, const Tensor<T>& seed) {
  if (!record_) {
    throw StateError("backward on a tape that does not record gradients");
  }
  if (nodes_.empty() || !root.valid() || root.id >= nodes_.size()) {
    throw StateError("backward without a recorded forward pass");
  }
  if (consumed_) {
    throw StateError("backward already ran on this tape");
  }
  if (seed.shape() != nodes_[root.id].value.shape()) {
    throw ShapeError("backward seed shape does not match root");
  }
  consumed_ = true;
  accumulate(root, seed);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.param != nullptr) {
      Tensor<T>& pg = n.param->grad;
      if (pg.shape() != n.grad.shape()) pg = Tensor<T>(n.grad.shape());
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
    }
    if (n.vjp) n.vjp(*this, n.grad);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace anchornet
