#include "anchornet/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace anchornet {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  validate_shape(shape);
  data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
  validate_shape(shape);
  if (data_.size() != shape.numel()) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape.str());
  }
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  validate_shape(shape);
  if (shape.numel() != shape_.numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor<T>(shape, data_);
}

template <typename T>
Tensor<T> Tensor<T>::item(int n) const {
  if (n < 0 || n >= shape_.n) {
    throw RangeError("batch index out of range");
  }
  const std::size_t len = static_cast<std::size_t>(shape_.c) * shape_.plane();
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * len);
  return Tensor<T>({1, shape_.c, shape_.h, shape_.w},
                   std::vector<T>(first, first + static_cast<std::ptrdiff_t>(len)));
}

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) {
    throw ShapeError("cannot stack an empty list of tensors");
  }
  const Shape first = items.front().shape();
  std::vector<T> data;
  data.reserve(first.numel() * items.size());
  for (const auto& t : items) {
    const Shape s = t.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w) {
      throw ShapeError("stack: mismatched shapes " + first.str() + " vs " +
                       s.str());
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  int total = 0;
  for (const auto& t : items) total += t.shape().n;
  return Tensor<T>({total, first.c, first.h, first.w}, std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> stack(std::span<const Tensor<float>>);
template Tensor<double> stack(std::span<const Tensor<double>>);

}  // namespace anchornet
