#include "attnprof/numkernel/tensor.hpp"

#include <algorithm>
#include <cstring>

#include "attnprof/errors.hpp"

namespace attnprof::nk {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(static_cast<std::size_t>(n), true));
}

Tensor Tensor::uninitialized(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(static_cast<std::size_t>(n), false));
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = uninitialized(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const float> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  }
  Tensor t = uninitialized(std::move(shape));
  std::copy(values.begin(), values.end(), t.values().begin());
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<float> values) {
  return from_values(std::move(shape), std::span<const float>(values.begin(), values.size()));
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), buffer_(other.buffer_.size(), false) {
  if (other.buffer_.size() > 0) {
    std::memcpy(buffer_.data(), other.buffer_.data(), other.buffer_.size() * sizeof(float));
  }
}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this != &other) {
    Tensor copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::int64_t Tensor::dim(std::int64_t i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw DimensionError("dimension index out of range for " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

MatrixView Tensor::matrix() {
  if (shape_.empty()) return {data(), 1, 1, 1};
  std::int64_t cols = shape_.back();
  std::int64_t rows = cols == 0 ? 0 : numel() / cols;
  if (cols == 0) {
    rows = 1;
    for (std::size_t i = 0; i + 1 < shape_.size(); ++i) rows *= shape_[i];
  }
  return {data(), rows, cols, cols};
}

ConstMatrixView Tensor::matrix() const {
  auto v = const_cast<Tensor*>(this)->matrix();
  return ConstMatrixView(v);
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), std::move(buffer_));
}

}  // namespace attnprof::nk
