#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "uex/core/error.hpp"

namespace uex {

/// Row-major dimension list. Image tensors are NCHW.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {}

  int rank() const { return static_cast<int>(dims_.size()); }
  int operator[](int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }
  /// Product of all dims except the first.
  std::size_t inner() const { return dims_.empty() ? 0 : numel() / static_cast<std::size_t>(dims_[0]); }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) s += (i ? "," : "") + std::to_string(dims_[i]);
    return s + "]";
  }

 private:
  std::vector<int> dims_;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_.numel(), "tensor data size does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Slice along the first dimension.
  std::span<T> row(int i) {
    const std::size_t n = shape_.inner();
    return {data_.data() + static_cast<std::size_t>(i) * n, n};
  }
  std::span<const T> row(int i) const {
    const std::size_t n = shape_.inner();
    return {data_.data() + static_cast<std::size_t>(i) * n, n};
  }

  void reshape(Shape s) {
    require(s.numel() == data_.size(), "reshape " + shape_.str() + " -> " + s.str());
    shape_ = std::move(s);
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = To(t[i]);
  return out;
}

template <class To, class From>
std::vector<To> vector_cast(std::span<const From> v) {
  std::vector<To> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = To(v[i]);
  return out;
}

}  // namespace uex
