#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "sscaps/error.hpp"

namespace sscaps {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-d array (last axis fastest).
///
/// The scalar type is a template parameter so the same kernels can run in
/// double precision for finite-difference verification; `Tensor` (float) is
/// the working type everywhere else.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Multi-index access; index count must equal rank.
  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  /// Elements per step along `axis`.
  std::size_t stride(std::size_t axis) const {
    std::size_t s = 1;
    for (std::size_t i = axis + 1; i < shape_.size(); ++i) s *= shape_[i];
    return s;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(),
                         [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  bool operator==(const BasicTensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " does not match tensor rank " + std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) {
        throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                         std::to_string(axis));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;
/// Integer class ids per voxel.
using LabelTensor = BasicTensor<std::uint8_t>;

/// A learnable value together with its accumulated gradient.
template <typename T>
struct GradPair {
  BasicTensor<T> value;
  BasicTensor<T> grad;

  GradPair() = default;
  explicit GradPair(BasicTensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() == value.shape()) {
      grad.fill(T{});
    } else {
      grad = BasicTensor<T>(value.shape());
    }
  }
};

}  // namespace sscaps
