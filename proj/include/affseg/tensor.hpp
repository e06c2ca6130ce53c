#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "affseg/errors.hpp"

namespace affseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor owning its storage.
///
/// Feature maps use channels-last layout [B, H, W, C]; token sequences
/// [B, L, C] share that memory layout with L = H * W.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != numel_of(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index size() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](Index i) noexcept { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const noexcept { return data_[static_cast<std::size_t>(i)]; }

  template <typename... I>
  T& at(I... idx) {
    return data_[offset({static_cast<Index>(idx)...})];
  }
  template <typename... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<Index>(idx)...})];
  }

  // Same storage, new view of the dimensions; element count must match.
  Tensor& reshape(Shape shape) & {
    if (numel_of(shape) != size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    shape_ = std::move(shape);
    return *this;
  }
  Tensor reshape(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }
  Tensor reshaped(Shape shape) const& {
    Tensor copy = *this;
    copy.reshape(std::move(shape));
    return copy;
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (Index i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  void require_shape(const Shape& expected, const char* what) const {
    if (shape_ != expected)
      throw ShapeError(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                       to_string(shape_));
  }
  void require_rank(int r, const char* what) const {
    if (rank() != r)
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                       to_string(shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t d = 0;
    for (Index i : idx) off = off * shape_[d++] + i;
    return static_cast<std::size_t>(off);
  }
  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_)
      throw ShapeError(std::string(what) + ": shape " + to_string(shape_) + " vs " +
                       to_string(other.shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace affseg
