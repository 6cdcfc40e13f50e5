#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apaseg/errors.hpp"

namespace apaseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

/// Dense row-major array. Rank-5 tensors use the (N, C, H, W, D) layout,
/// rank-4 tensors hold projected planes as (N, C, A, B).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d < 1) throw ContractError("tensor dims must be >= 1, got " + shape_str(shape_));
    }
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != numel_of(shape_)) {
      throw ContractError("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(Index n, Index c, Index h, Index w, Index d) { return data_[offset5(n, c, h, w, d)]; }
  const T& at(Index n, Index c, Index h, Index w, Index d) const {
    return data_[offset5(n, c, h, w, d)];
  }
  T& at(Index n, Index c, Index a, Index b) { return data_[offset4(n, c, a, b)]; }
  const T& at(Index n, Index c, Index a, Index b) const { return data_[offset4(n, c, a, b)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != numel()) {
      throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset5(Index n, Index c, Index h, Index w, Index d) const {
    return static_cast<std::size_t>(
        (((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w) * shape_[4] + d);
  }
  std::size_t offset4(Index n, Index c, Index a, Index b) const {
    return static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + a) * shape_[3] + b);
  }

  Shape shape_;
  std::vector<T> data_;
};

void require_rank(const Shape& shape, int rank, const char* what);
void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace apaseg
