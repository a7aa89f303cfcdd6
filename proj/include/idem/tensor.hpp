#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idem {

/// Thrown when tensor shapes or network wiring do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NCHW extents. Scalars are represented as (1,1,1,1).
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

inline void expect_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + a.str() + " vs " + b.str());
}

/// Allocator whose value-initialisation is default-initialisation, so
/// scratch tensors that are fully overwritten skip the zero fill.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Dense batch of feature maps in (batch, channel, height, width) order.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, DefaultInitAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {}
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : Tensor(Shape{n, c, h, w}, fill) {}
  Tensor(Shape s, const std::vector<T>& data) : shape_(s), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.numel()) throw ShapeError("tensor data size does not match shape " + s.str());
  }

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }
  /// Contents unspecified; the caller must overwrite every element.
  static Tensor uninitialized(Shape s) {
    Tensor t;
    t.shape_ = s;
    t.data_.resize(s.numel());
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// One sample of the batch, copied.
  Tensor sample(std::size_t n) const {
    Tensor out(Shape{1, shape_.c, shape_.h, shape_.w});
    const std::size_t stride = shape_.c * shape_.plane();
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(n * stride), stride, out.data_.begin());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

  Tensor& operator+=(const Tensor& o) {
    expect_same(shape_, o.shape_, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  Shape shape_{};
  Storage data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  expect_same(a.shape(), b.shape(), "tensor -");
  auto out = Tensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

/// Stack single-sample tensors of equal shape along the batch axis.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw ShapeError("stack_batch: no samples");
  const Shape s0 = samples.front().shape();
  std::vector<T> data;
  data.reserve(samples.size() * s0.c * s0.plane());
  std::size_t n = 0;
  for (const auto& t : samples) {
    if (t.shape().c != s0.c || t.shape().h != s0.h || t.shape().w != s0.w)
      throw ShapeError("stack_batch: mismatched sample " + t.shape().str());
    data.insert(data.end(), t.vec().begin(), t.vec().end());
    n += t.shape().n;
  }
  return Tensor<T>(Shape{n, s0.c, s0.h, s0.w}, std::move(data));
}

}  // namespace idem
