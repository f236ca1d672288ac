#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnprof/numkernel/memory.hpp"

namespace attnprof::nk {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Row-major 2-D window onto float storage; `ld` is the distance between rows.
struct MatrixView {
  float* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t ld = 0;

  float& operator()(std::int64_t r, std::int64_t c) const { return data[r * ld + c]; }
  float* row(std::int64_t r) const { return data + r * ld; }
  MatrixView block(std::int64_t r0, std::int64_t c0, std::int64_t nr, std::int64_t nc) const {
    return {data + r0 * ld + c0, nr, nc, ld};
  }
};

struct ConstMatrixView {
  const float* data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t ld = 0;

  ConstMatrixView() = default;
  ConstMatrixView(const float* d, std::int64_t r, std::int64_t c, std::int64_t l)
      : data(d), rows(r), cols(c), ld(l) {}
  ConstMatrixView(const MatrixView& v) : data(v.data), rows(v.rows), cols(v.cols), ld(v.ld) {}  // NOLINT

  float operator()(std::int64_t r, std::int64_t c) const { return data[r * ld + c]; }
  const float* row(std::int64_t r) const { return data + r * ld; }
  ConstMatrixView block(std::int64_t r0, std::int64_t c0, std::int64_t nr, std::int64_t nc) const {
    return {data + r0 * ld + c0, nr, nc, ld};
  }
};

// Dense float32 tensor with contiguous row-major storage. Copies are deep and
// go through the accountant like any other allocation; the tag is the one
// active when the storage was allocated.
class Tensor {
 public:
  Tensor() = default;
  static Tensor zeros(Shape shape);
  static Tensor uninitialized(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_values(Shape shape, std::span<const float> values);
  static Tensor from_values(Shape shape, std::initializer_list<float> values);

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t rank() const noexcept { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(buffer_.size()); }
  bool empty() const noexcept { return buffer_.size() == 0; }
  std::size_t bytes() const noexcept { return buffer_.size() * sizeof(float); }
  std::optional<LayerTag> tag() const noexcept { return buffer_.tag(); }

  std::span<float> values() noexcept { return {buffer_.data(), buffer_.size()}; }
  std::span<const float> values() const noexcept { return {buffer_.data(), buffer_.size()}; }
  float* data() noexcept { return buffer_.data(); }
  const float* data() const noexcept { return buffer_.data(); }

  float& operator[](std::int64_t i) { return buffer_.data()[i]; }
  float operator[](std::int64_t i) const { return buffer_.data()[i]; }
  float& at(std::int64_t r, std::int64_t c) { return buffer_.data()[r * shape_.back() + c]; }
  float at(std::int64_t r, std::int64_t c) const { return buffer_.data()[r * shape_.back() + c]; }

  // Rank-2 views; higher ranks are flattened to (prod(leading) x last).
  MatrixView matrix();
  ConstMatrixView matrix() const;

  // Same storage, new shape with equal element count.
  Tensor reshaped(Shape shape) &&;

 private:
  Tensor(Shape shape, Buffer buffer) : shape_(std::move(shape)), buffer_(std::move(buffer)) {}

  Shape shape_;
  Buffer buffer_;
};

}  // namespace attnprof::nk
