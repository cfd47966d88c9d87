#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sola/error.hpp"

namespace sola {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << "x" << c << "x" << h << "x" << w << "]";
    return os.str();
  }
};

/// Dense batch of feature maps stored NCHW. A FeatureMap of height x width x
/// channels is one sample (index n) of this tensor.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape_{n, c, h, w}, data_(shape_.numel(), fill) {}
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t sample_stride() const {
    return static_cast<std::size_t>(shape_.c) * shape_.h * shape_.w;
  }
  std::size_t plane_stride() const {
    return static_cast<std::size_t>(shape_.h) * shape_.w;
  }
  T* sample(int i) { return data_.data() + i * sample_stride(); }
  const T* sample(int i) const { return data_.data() + i * sample_stride(); }
  T* plane(int i, int ch) { return sample(i) + ch * plane_stride(); }
  const T* plane(int i, int ch) const { return sample(i) + ch * plane_stride(); }

  T& operator()(int i, int ch, int y, int x) {
    return data_[((static_cast<std::size_t>(i) * shape_.c + ch) * shape_.h + y) * shape_.w + x];
  }
  const T& operator()(int i, int ch, int y, int x) const {
    return data_[((static_cast<std::size_t>(i) * shape_.c + ch) * shape_.h + y) * shape_.w + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  /// One sample as its own tensor (n = 1).
  Tensor slice(int i) const {
    Tensor out(1, shape_.c, shape_.h, shape_.w);
    std::copy_n(sample(i), sample_stride(), out.data());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  void check_same(const Tensor& o, const char* what) const {
    if (!(o.shape_ == shape_))
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + o.shape_.str());
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <typename T, typename Rng>
Tensor<T> random_tensor(Shape s, Rng& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Reductions with a summation order fixed by n alone. Eigen's vectorised
// reductions over unaligned maps peel by address, so their rounding changes
// from one allocation to the next and training would not be repeatable.
// Sums f(0..n-1) into eight lanes of type A, combined in a fixed tree.
template <typename A, typename F>
A ordered_accumulate(std::size_t n, F f) {
  A acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += static_cast<A>(f(i + k));
  for (; i < n; ++i) acc[i % 8] += static_cast<A>(f(i));
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
T ordered_dot(const T* a, const T* b, std::size_t n) {
  return ordered_accumulate<T>(n, [=](std::size_t i) { return a[i] * b[i]; });
}

template <typename T>
T ordered_sum(const T* a, std::size_t n) {
  return ordered_accumulate<T>(n, [=](std::size_t i) { return a[i]; });
}

/// Concatenate along channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy_n(a.sample(i), a.sample_stride(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_stride(), out.sample(i) + a.sample_stride());
  }
  return out;
}

/// Inverse of concat_channels: the first `ca` channels go to `a`.
template <typename T>
void split_channels(const Tensor<T>& in, int ca, Tensor<T>& a, Tensor<T>& b) {
  a = Tensor<T>(in.n(), ca, in.h(), in.w());
  b = Tensor<T>(in.n(), in.c() - ca, in.h(), in.w());
  for (int i = 0; i < in.n(); ++i) {
    std::copy_n(in.sample(i), a.sample_stride(), a.sample(i));
    std::copy_n(in.sample(i) + a.sample_stride(), b.sample_stride(), b.sample(i));
  }
}

}  // namespace sola
