#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hierdoc {

using Shape = std::vector<std::size_t>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Cache-line aligned buffers keep vectorized reduction order independent of
// where the allocator happens to place data.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major n-dimensional array. Any array can be viewed as a matrix
// whose column count is the last dimension.
template <typename T>
class Array {
 public:
  using value_type = T;

  Array() = default;

  explicit Array(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_shape();
  }

  Array(Shape shape, std::initializer_list<T> data)
      : Array(std::move(shape), AlignedVector<T>(data)) {}

  Array(Shape shape, const std::vector<T>& data)
      : Array(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  Array(Shape shape, AlignedVector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw std::invalid_argument("array data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " +
                                  shape_string(shape_));
    }
  }

  static Array matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return Array({rows, cols}, fill);
  }

  static Array scalar(T value) { return Array({1}, AlignedVector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const {
    return shape_.empty() || shape_.back() == 0 ? 0 : data_.size() / shape_.back();
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Array reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) +
                                  " to " + shape_string(shape));
    }
    return Array(std::move(shape), data_);
  }

  template <typename U>
  Array<U> cast() const {
    return Array<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Throws NumericError naming `where` if any element is NaN or infinite.
  void check_finite(std::string_view where) const {
    if (!all_finite()) {
      throw NumericError("non-finite value in " + std::string(where));
    }
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw std::invalid_argument("array dimensions must be positive, got " +
                                    shape_string(shape_));
      }
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Numerically stable softmax along `axis`. Negative axes count from the end.
template <typename T>
Array<T> softmax(const Array<T>& x, int axis = -1);

}  // namespace hierdoc
