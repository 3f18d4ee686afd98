#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dnt/error.hpp"

namespace dnt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor. `T` is float on every training path; double is
/// used by the gradient-check tests.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    if (shape_.empty()) fail(ErrorKind::invalid_shape, "tensor needs at least one dimension");
    for (auto d : shape_) {
      if (d == 0) fail(ErrorKind::invalid_shape, "zero dimension in " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : BasicTensor(std::move(shape)) {
    if (data.size() != data_.size()) {
      fail(ErrorKind::shape_mismatch, "data length " + std::to_string(data.size()) +
                                          " does not match shape " + shape_str(shape_));
    }
    data_ = std::move(data);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same data, new shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    BasicTensor out;
    if (shape_numel(shape) != size()) {
      fail(ErrorKind::shape_mismatch, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> converted(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(converted));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T = float>
BasicTensor<T> tensor_create(Shape shape, T fill) {
  return BasicTensor<T>(std::move(shape), fill);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) fail(ErrorKind::shape_mismatch, std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
}

/// alpha * x + y
template <typename T>
BasicTensor<T> axpy(T alpha, const BasicTensor<T>& x, const BasicTensor<T>& y) {
  require_same_shape(x.shape(), y.shape(), "axpy");
  BasicTensor<T> out = y;
  if (alpha == T{0}) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * x[i];
  return out;
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n], all row-major.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) fail(ErrorKind::shape_mismatch, "matmul needs rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    fail(ErrorKind::shape_mismatch, "matmul inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  BasicTensor<T> out({a.dim(0), b.dim(1)});
  detail::gemm_accumulate(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

}  // namespace dnt
