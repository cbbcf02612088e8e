#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tconv {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t count() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << "(" << s.n << ", " << s.c << ", " << s.h << ", " << s.w << ")";
  return os.str();
}

// Dense rank-4 array in (n, c, h, w) row-major order.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T{0}) : shape_(shape), data_(shape.count(), fill) {}
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{0})
      : Tensor4(Shape4{n, c, h, w}, fill) {}
  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& vector() const { return data_; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Contiguous (h, w) plane of one (n, c) pair.
  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  // All channels of one batch item.
  std::span<T> item(std::size_t n) {
    const std::size_t len = shape_.c * shape_.plane();
    return std::span<T>(data_).subspan(n * len, len);
  }
  std::span<const T> item(std::size_t n) const {
    const std::size_t len = shape_.c * shape_.plane();
    return std::span<const T>(data_).subspan(n * len, len);
  }

  Tensor4 reshaped(Shape4 s) const {
    if (s.count() != shape_.count()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    return Tensor4(s, data_);
  }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

template <typename T>
T max_abs(const Tensor4<T>& t) {
  T m = T{0};
  for (T v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
  T m = T{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// max|a - b| / (1 + max|b|)
template <typename T>
T relative_deviation(const Tensor4<T>& a, const Tensor4<T>& b) {
  return max_abs_diff(a, b) / (T{1} + max_abs(b));
}

}  // namespace tconv
