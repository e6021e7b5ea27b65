#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "anchornet/kernels.hpp"

namespace anchornet {

/// A trainable array plus its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  /// Whether SGD weight decay applies (false for normalization affine terms).
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(wd) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
  bool valid() const { return id != kInvalid; }
};

/// Records a forward computation and replays vector-Jacobian products in
/// reverse. A tape belongs to a single training step and a single thread.
/// With `record_grad` off it only evaluates, which is what inference uses.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record_grad = true) : record_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf value; gradients are tracked when value.requires_grad() is set.
  Var input(Tensor<T> value);
  /// Leaf bound to a parameter; backward accumulates into `p.grad`.
  Var param(Parameter<T>& p);

  Var conv2d(Var x, Var weights, Stride stride, int groups = 1);
  Var batchnorm(Var x, Var gamma, Var beta, std::span<T> running_mean,
                std::span<T> running_var, NormMode mode);
  Var silu(Var x);
  Var gap(Var x);
  Var linear(Var x, Var weights, std::optional<Var> bias = std::nullopt);
  Var add(Var a, Var b);
  Var center_crop(Var x, int margin);
  Var zero_pad(Var x, int pad);
  Var resize_bilinear(Var x, int out_h, int out_w);
  /// Scalar sum over rows of weight[i] * -log softmax(logits[i])[label[i]].
  Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                            std::span<const T> weights);

  const Tensor<T>& value(Var v) const;
  /// Gradient of the last backward root with respect to `v` (zeros if none).
  Tensor<T> grad(Var v) const;

  /// Runs reverse accumulation from a scalar root (seed 1).
  void backward(Var root);
  void backward(Var root, const Tensor<T>& seed);

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor<T>&)> vjp;
    Parameter<T>* param = nullptr;
  };

  Var push(Tensor<T> value, bool needs_grad,
           std::function<void(Tape&, const Tensor<T>&)> vjp);
  bool needs(Var v) const { return nodes_.at(v.id).needs_grad; }
  void accumulate(Var v, Tensor<T> g);
  const Node& node(Var v) const;

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace anchornet
