#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sola/tensor.hpp"

namespace sola {

/// A trainable tensor with its accumulated gradient.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Shape s) : value(s), grad(s) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Non-owning reference to a parameter (or persistent buffer), keyed by its
/// module path. Buffers carry `buffer = true` and are never optimized.
template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
  bool buffer = false;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T, typename Rng>
void uniform_init(Tensor<T>& t, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}

template <typename T>
inline T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

enum class Padding { zeros, reflect };

struct ConvSpec {
  int in = 1, out = 1, kh = 1, kw = 1;
  int stride_h = 1, stride_w = 1;
  int pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
  int dil_h = 1, dil_w = 1;
  Padding padding = Padding::zeros;
  bool bias = true;

  static ConvSpec square(int in, int out, int k, int stride = 1, int pad = 0, bool bias = true) {
    ConvSpec s;
    s.in = in;
    s.out = out;
    s.kh = s.kw = k;
    s.stride_h = s.stride_w = stride;
    s.pad_top = s.pad_bottom = s.pad_left = s.pad_right = pad;
    s.bias = bias;
    return s;
  }

  int out_h(int h) const { return (h + pad_top + pad_bottom - dil_h * (kh - 1) - 1) / stride_h + 1; }
  int out_w(int w) const { return (w + pad_left + pad_right - dil_w * (kw - 1) - 1) / stride_w + 1; }
  int patch() const { return in * kh * kw; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && stride_h == 1 && stride_w == 1 && pad_top == 0 &&
           pad_bottom == 0 && pad_left == 0 && pad_right == 0;
  }
};

namespace detail {

// Maps a padded coordinate to a source index, or -1 for a zero tap.
inline int source_index(int i, int size, Padding mode) {
  if (i >= 0 && i < size) return i;
  if (mode == Padding::zeros) return -1;
  if (i < 0) i = -i;
  if (i >= size) i = 2 * size - 2 - i;
  return (i >= 0 && i < size) ? i : -1;
}

// Output columns [lo, hi) whose taps land inside the row for column offset
// `off`; only the columns outside need the padding rule.
inline std::pair<int, int> interior_columns(int wo, int stride, int off, int w) {
  int lo = 0, hi = wo;
  while (lo < wo && lo * stride + off < 0) ++lo;
  while (hi > lo && (hi - 1) * stride + off >= w) --hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* img, int h, int w, const ConvSpec& s, int ho, int wo, T* col) {
  const int sw = s.stride_w;
  for (int c = 0; c < s.in; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < s.kh; ++ki) {
      for (int kj = 0; kj < s.kw; ++kj) {
        const int off = kj * s.dil_w - s.pad_left;
        const auto [lo, hi] = interior_columns(wo, sw, off, w);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = source_index(oy * s.stride_h - s.pad_top + ki * s.dil_h, h, s.padding);
          if (iy < 0) {
            std::fill_n(col, wo, T(0));
          } else {
            const T* row = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < lo; ++ox) {
              const int ix = source_index(ox * sw + off, w, s.padding);
              col[ox] = ix < 0 ? T(0) : row[ix];
            }
            if (sw == 1)
              std::copy(row + lo + off, row + hi + off, col + lo);
            else
              for (int ox = lo; ox < hi; ++ox) col[ox] = row[ox * sw + off];
            for (int ox = hi; ox < wo; ++ox) {
              const int ix = source_index(ox * sw + off, w, s.padding);
              col[ox] = ix < 0 ? T(0) : row[ix];
            }
          }
          col += wo;
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int h, int w, const ConvSpec& s, int ho, int wo, T* img) {
  const int sw = s.stride_w;
  for (int c = 0; c < s.in; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < s.kh; ++ki) {
      for (int kj = 0; kj < s.kw; ++kj) {
        const int off = kj * s.dil_w - s.pad_left;
        const auto [lo, hi] = interior_columns(wo, sw, off, w);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = source_index(oy * s.stride_h - s.pad_top + ki * s.dil_h, h, s.padding);
          if (iy >= 0) {
            T* row = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < lo; ++ox) {
              const int ix = source_index(ox * sw + off, w, s.padding);
              if (ix >= 0) row[ix] += col[ox];
            }
            for (int ox = lo; ox < hi; ++ox) row[ox * sw + off] += col[ox];
            for (int ox = hi; ox < wo; ++ox) {
              const int ix = source_index(ox * sw + off, w, s.padding);
              if (ix >= 0) row[ix] += col[ox];
            }
          }
          col += wo;
        }
      }
    }
  }
}

// Copies one channel into a (h + pt + pb) x (w + pl + pr) buffer, resolving
// the padding mode.
template <typename T>
void pad_plane(const T* src, int h, int w, const ConvSpec& s, T* dst) {
  const int pw = w + s.pad_left + s.pad_right, ph = h + s.pad_top + s.pad_bottom;
  for (int y = 0; y < ph; ++y) {
    const int iy = source_index(y - s.pad_top, h, s.padding);
    T* row = dst + static_cast<std::size_t>(y) * pw;
    if (iy < 0) {
      std::fill_n(row, pw, T(0));
      continue;
    }
    const T* in = src + static_cast<std::size_t>(iy) * w;
    for (int x = 0; x < pw; ++x) {
      const int ix = source_index(x - s.pad_left, w, s.padding);
      row[x] = ix < 0 ? T(0) : in[ix];
    }
  }
}

// Adjoint of pad_plane: folds a padded gradient back onto the source plane.
template <typename T>
void unpad_plane_add(const T* padded, int h, int w, const ConvSpec& s, T* dst) {
  const int pw = w + s.pad_left + s.pad_right, ph = h + s.pad_top + s.pad_bottom;
  for (int y = 0; y < ph; ++y) {
    const int iy = source_index(y - s.pad_top, h, s.padding);
    if (iy < 0) continue;
    const T* row = padded + static_cast<std::size_t>(y) * pw;
    T* out = dst + static_cast<std::size_t>(iy) * w;
    for (int x = 0; x < pw; ++x) {
      const int ix = source_index(x - s.pad_left, w, s.padding);
      if (ix >= 0) out[ix] += row[x];
    }
  }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) with asymmetric padding, stride and
/// dilation. Weights are laid out out x in x kh x kw.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  template <typename Rng>
  Conv2d(const ConvSpec& spec, Rng& rng) : spec_(spec) {
    weight_ = Param<T>(Shape{spec.out, spec.in, spec.kh, spec.kw});
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.patch()));
    uniform_init(weight_.value, rng, bound);
    if (spec.bias) {
      bias_ = Param<T>(Shape{1, spec.out, 1, 1});
      uniform_init(bias_.value, rng, bound);
    }
  }

  const ConvSpec& spec() const { return spec_; }
  Param<T>& weight() { return weight_; }
  const Param<T>& weight() const { return weight_; }
  Param<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c() != spec_.in)
      throw ShapeError("conv: expected " + std::to_string(spec_.in) + " channels, got " + x.shape().str());
    input_ = x;
    return apply(x);
  }

  /// Forward pass without caching anything for backward.
  Tensor<T> apply(const Tensor<T>& x) const {
    if (x.c() != spec_.in)
      throw ShapeError("conv: expected " + std::to_string(spec_.in) + " channels, got " + x.shape().str());
    const int ho = spec_.out_h(x.h()), wo = spec_.out_w(x.w());
    if (ho <= 0 || wo <= 0) throw ShapeError("conv: input " + x.shape().str() + " too small");
    Tensor<T> y(x.n(), spec_.out, ho, wo);
    if (direct()) {
      direct_forward(x, y);
      return y;
    }
    const int k = spec_.patch(), p = ho * wo;
    std::vector<T> col;
    ConstMatMap<T> wmat(weight_.value.data(), spec_.out, k);
    for (int i = 0; i < x.n(); ++i) {
      const T* src = x.sample(i);
      if (!spec_.pointwise()) {
        col.resize(static_cast<std::size_t>(k) * p);
        detail::im2col(src, x.h(), x.w(), spec_, ho, wo, col.data());
        src = col.data();
      }
      MatMap<T> out(y.sample(i), spec_.out, p);
      out.noalias() = wmat * ConstMatMap<T>(src, k, p);
      if (spec_.bias)
        for (int o = 0; o < spec_.out; ++o) out.row(o).array() += bias_.value[o];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    const Tensor<T>& x = input_;
    const int ho = dy.h(), wo = dy.w();
    const int k = spec_.patch(), p = ho * wo;
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(x.shape());
    if (direct()) {
      direct_backward(x, dy, need_input_grad ? &dx : nullptr);
      return dx;
    }
    std::vector<T> col, dcol;
    ConstMatMap<T> wmat(weight_.value.data(), spec_.out, k);
    MatMap<T> dw(weight_.grad.data(), spec_.out, k);
    for (int i = 0; i < x.n(); ++i) {
      const T* src = x.sample(i);
      if (!spec_.pointwise()) {
        col.resize(static_cast<std::size_t>(k) * p);
        detail::im2col(src, x.h(), x.w(), spec_, ho, wo, col.data());
        src = col.data();
      }
      ConstMatMap<T> g(dy.sample(i), spec_.out, p);
      if (weight_.trainable) dw.noalias() += g * ConstMatMap<T>(src, k, p).transpose();
      if (spec_.bias && bias_.trainable)
        for (int o = 0; o < spec_.out; ++o) bias_.grad[o] += ordered_sum(dy.sample(i) + static_cast<std::size_t>(o) * p, p);
      if (need_input_grad) {
        if (spec_.pointwise()) {
          MatMap<T>(dx.sample(i), k, p).noalias() = wmat.transpose() * g;
        } else {
          dcol.resize(static_cast<std::size_t>(k) * p);
          MatMap<T>(dcol.data(), k, p).noalias() = wmat.transpose() * g;
          detail::col2im(dcol.data(), x.h(), x.w(), spec_, ho, wo, dx.sample(i));
        }
      }
    }
    return dx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight_});
    if (spec_.bias) out.push_back({prefix + ".bias", &bias_});
  }

 private:
  // Few output channels at stride 1 (the noise-extraction front end): a
  // direct shifted-row loop beats building a large im2col buffer.
  bool direct() const {
    return spec_.out <= 4 && spec_.in <= 4 && spec_.kh * spec_.kw > 1 && spec_.stride_h == 1 && spec_.stride_w == 1 && spec_.dil_h == 1 && spec_.dil_w == 1;
  }

  void direct_forward(const Tensor<T>& x, Tensor<T>& y) const {
    const int ho = y.h(), wo = y.w();
    const int pw = x.w() + spec_.pad_left + spec_.pad_right, ph = x.h() + spec_.pad_top + spec_.pad_bottom;
    std::vector<T> padded(static_cast<std::size_t>(ph) * pw);
    for (int i = 0; i < x.n(); ++i) {
      for (int o = 0; o < spec_.out; ++o)
        std::fill_n(y.plane(i, o), y.plane_stride(), spec_.bias ? bias_.value[o] : T(0));
      for (int c = 0; c < spec_.in; ++c) {
        detail::pad_plane(x.plane(i, c), x.h(), x.w(), spec_, padded.data());
        for (int o = 0; o < spec_.out; ++o) {
          T* out = y.plane(i, o);
          for (int a = 0; a < spec_.kh; ++a)
            for (int b = 0; b < spec_.kw; ++b) {
              const T wv = weight_.value(o, c, a, b);
              if (wv == T(0)) continue;
              for (int yy = 0; yy < ho; ++yy) {
                const T* src = padded.data() + static_cast<std::size_t>(yy + a) * pw + b;
                T* dst = out + static_cast<std::size_t>(yy) * wo;
                for (int xx = 0; xx < wo; ++xx) dst[xx] += wv * src[xx];
              }
            }
        }
      }
    }
  }

  void direct_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
    const int ho = dy.h(), wo = dy.w();
    const int pw = x.w() + spec_.pad_left + spec_.pad_right, ph = x.h() + spec_.pad_top + spec_.pad_bottom;
    std::vector<T> padded(static_cast<std::size_t>(ph) * pw), dpadded, lanes(static_cast<std::size_t>(wo));
    for (int i = 0; i < x.n(); ++i) {
      if (spec_.bias && bias_.trainable)
        for (int o = 0; o < spec_.out; ++o) {
          const T* g = dy.plane(i, o);
          T acc = 0;
          for (std::size_t k = 0; k < dy.plane_stride(); ++k) acc += g[k];
          bias_.grad[o] += acc;
        }
      for (int c = 0; c < spec_.in; ++c) {
        detail::pad_plane(x.plane(i, c), x.h(), x.w(), spec_, padded.data());
        if (dx) dpadded.assign(padded.size(), T(0));
        for (int o = 0; o < spec_.out; ++o) {
          const T* g = dy.plane(i, o);
          for (int a = 0; a < spec_.kh; ++a)
            for (int b = 0; b < spec_.kw; ++b) {
              if (weight_.trainable) {
                // Per-column partial sums first: vectorises and keeps a fixed order.
                std::fill(lanes.begin(), lanes.end(), T(0));
                for (int yy = 0; yy < ho; ++yy) {
                  const T* gr = g + static_cast<std::size_t>(yy) * wo;
                  const T* src = padded.data() + static_cast<std::size_t>(yy + a) * pw + b;
                  for (int xx = 0; xx < wo; ++xx) lanes[xx] += gr[xx] * src[xx];
                }
                weight_.grad(o, c, a, b) += ordered_sum(lanes.data(), lanes.size());
              }
              if (dx) {
                const T wv = weight_.value(o, c, a, b);
                for (int yy = 0; yy < ho; ++yy) {
                  T* dst = dpadded.data() + static_cast<std::size_t>(yy + a) * pw + b;
                  const T* gr = g + static_cast<std::size_t>(yy) * wo;
                  for (int xx = 0; xx < wo; ++xx) dst[xx] += wv * gr[xx];
                }
              }
            }
        }
        if (dx) detail::unpad_plane_add(dpadded.data(), x.h(), x.w(), spec_, dx->plane(i, c));
      }
    }
  }

  ConvSpec spec_;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

/// Per-channel batch normalization with running statistics.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = Param<T>(Shape{1, channels, 1, 1});
    gamma_.value.fill(T(1));
    beta_ = Param<T>(Shape{1, channels, 1, 1});
    running_mean_ = Param<T>(Shape{1, channels, 1, 1});
    running_var_ = Param<T>(Shape{1, channels, 1, 1});
    running_var_.value.fill(T(1));
    running_mean_.trainable = running_var_.trainable = false;
  }

  void set_training(bool t) { training_ = t; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c() != channels_) throw ShapeError("batchnorm: channel mismatch " + x.shape().str());
    const std::size_t hw = x.plane_stride();
    const double count = static_cast<double>(x.n()) * hw;
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(channels_, T(0));
    Tensor<T> y(x.shape());
    for (int c = 0; c < channels_; ++c) {
      double mean, var;
      if (training_) {
        double s = 0, ss = 0;
        for (int i = 0; i < x.n(); ++i) s += ordered_accumulate<double>(hw, [p = x.plane(i, c)](std::size_t k) { return p[k]; });
        mean = s / count;
        for (int i = 0; i < x.n(); ++i)
          ss += ordered_accumulate<double>(hw, [p = x.plane(i, c), mean](std::size_t k) {
            const double d = p[k] - mean;
            return d * d;
          });
        var = ss / count;
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean_.value[c] = static_cast<T>((1 - momentum_) * running_mean_.value[c] + momentum_ * mean);
        running_var_.value[c] = static_cast<T>((1 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      const T m = static_cast<T>(mean);
      inv_std_[c] = inv;
      const T g = gamma_.value[c], b = beta_.value[c];
      for (int i = 0; i < x.n(); ++i) {
        const T* p = x.plane(i, c);
        T* xh = xhat_.plane(i, c);
        T* q = y.plane(i, c);
        for (std::size_t k = 0; k < hw; ++k) {
          xh[k] = (p[k] - m) * inv;
          q[k] = g * xh[k] + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t hw = dy.plane_stride();
    const T count = static_cast<T>(static_cast<double>(dy.n()) * hw);
    Tensor<T> dx(dy.shape());
    for (int c = 0; c < channels_; ++c) {
      double sdy = 0, sdx = 0;
      for (int i = 0; i < dy.n(); ++i) {
        const T *g = dy.plane(i, c), *xh = xhat_.plane(i, c);
        sdy += ordered_accumulate<double>(hw, [g](std::size_t k) { return g[k]; });
        sdx += ordered_accumulate<double>(hw, [g, xh](std::size_t k) { return g[k] * xh[k]; });
      }
      const T sum_dy = static_cast<T>(sdy), sum_dy_xhat = static_cast<T>(sdx);
      if (gamma_.trainable) gamma_.grad[c] += sum_dy_xhat;
      if (beta_.trainable) beta_.grad[c] += sum_dy;
      const T scale = gamma_.value[c] * inv_std_[c];
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.plane(i, c);
        const T* xh = xhat_.plane(i, c);
        T* d = dx.plane(i, c);
        if (training_) {
          for (std::size_t k = 0; k < hw; ++k)
            d[k] = scale * (g[k] - sum_dy / count - xh[k] * sum_dy_xhat / count);
        } else {
          for (std::size_t k = 0; k < hw; ++k) d[k] = scale * g[k];
        }
      }
    }
    return dx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &gamma_});
    out.push_back({prefix + ".bias", &beta_});
    out.push_back({prefix + ".running_mean", &running_mean_, true});
    out.push_back({prefix + ".running_var", &running_var_, true});
  }

 private:
  int channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  bool training_ = true;
  Param<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(Tensor<T> x) {
    for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
    output_ = x;
    return x;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!(output_[i] > T(0))) dy[i] = T(0);
    return dy;
  }

 private:
  Tensor<T> output_;
};

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(Tensor<T> x) {
    for (auto& v : x.vec()) v = sigmoid(v);
    output_ = x;
    return x;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= output_[i] * (T(1) - output_[i]);
    return dy;
  }
  const Tensor<T>& output() const { return output_; }

 private:
  Tensor<T> output_;
};

template <typename T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(int k, int stride, int pad) : k_(k), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x) {
    const int ho = (x.h() + 2 * pad_ - k_) / stride_ + 1;
    const int wo = (x.w() + 2 * pad_ - k_) / stride_ + 1;
    in_shape_ = x.shape();
    Tensor<T> y(x.n(), x.c(), ho, wo);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* p = x.plane(i, c);
        const std::size_t base = static_cast<std::size_t>(i * x.c() + c) * x.plane_stride();
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t arg = 0;
            for (int a = 0; a < k_; ++a) {
              const int iy = oy * stride_ - pad_ + a;
              if (iy < 0 || iy >= x.h()) continue;
              for (int b = 0; b < k_; ++b) {
                const int ix = ox * stride_ - pad_ + b;
                if (ix < 0 || ix >= x.w()) continue;
                const T v = p[iy * x.w() + ix];
                if (v > best) {
                  best = v;
                  arg = base + static_cast<std::size_t>(iy) * x.w() + ix;
                }
              }
            }
            y[o] = best;
            argmax_[o] = arg;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
    return dx;
  }

 private:
  int k_ = 3, stride_ = 2, pad_ = 1;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

namespace detail {
// Bin boundaries of adaptive average pooling: [floor(i*in/out), ceil((i+1)*in/out)).
inline int bin_start(int i, int in, int out) { return (i * in) / out; }
inline int bin_end(int i, int in, int out) { return ((i + 1) * in + out - 1) / out; }
}  // namespace detail

/// Adaptive average pooling to a fixed grid. Works for grids larger than the
/// input too (bins then overlap and replicate).
template <typename T>
class AdaptiveAvgPool2d {
 public:
  AdaptiveAvgPool2d() = default;
  AdaptiveAvgPool2d(int out_h, int out_w) : oh_(out_h), ow_(out_w) {}

  Tensor<T> forward(const Tensor<T>& x) {
    in_shape_ = x.shape();
    if (x.h() == oh_ && x.w() == ow_) return x;
    Tensor<T> y(x.n(), x.c(), oh_, ow_);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* p = x.plane(i, c);
        T* q = y.plane(i, c);
        for (int oy = 0; oy < oh_; ++oy) {
          const int y0 = detail::bin_start(oy, x.h(), oh_), y1 = detail::bin_end(oy, x.h(), oh_);
          for (int ox = 0; ox < ow_; ++ox) {
            const int x0 = detail::bin_start(ox, x.w(), ow_), x1 = detail::bin_end(ox, x.w(), ow_);
            T s = 0;
            for (int a = y0; a < y1; ++a)
              for (int b = x0; b < x1; ++b) s += p[a * x.w() + b];
            q[oy * ow_ + ox] = s / static_cast<T>((y1 - y0) * (x1 - x0));
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    const Shape& s = in_shape_;
    if (s.h == oh_ && s.w == ow_) return dy;
    Tensor<T> dx(s);
    for (int i = 0; i < s.n; ++i)
      for (int c = 0; c < s.c; ++c) {
        const T* g = dy.plane(i, c);
        T* d = dx.plane(i, c);
        for (int oy = 0; oy < oh_; ++oy) {
          const int y0 = detail::bin_start(oy, s.h, oh_), y1 = detail::bin_end(oy, s.h, oh_);
          for (int ox = 0; ox < ow_; ++ox) {
            const int x0 = detail::bin_start(ox, s.w, ow_), x1 = detail::bin_end(ox, s.w, ow_);
            const T v = g[oy * ow_ + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (int a = y0; a < y1; ++a)
              for (int b = x0; b < x1; ++b) d[a * s.w + b] += v;
          }
        }
      }
    return dx;
  }

 private:
  int oh_ = 1, ow_ = 1;
  Shape in_shape_;
};

/// Mean over spatial positions: N x C x H x W -> N x C x 1 x 1.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), 1, 1);
  const std::size_t hw = x.plane_stride();
  for (int i = 0; i < x.n(); ++i)
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(i, c);
      T s = 0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      y(i, c, 0, 0) = s / static_cast<T>(hw);
    }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& in) {
  Tensor<T> dx(in);
  const std::size_t hw = dx.plane_stride();
  for (int i = 0; i < in.n; ++i)
    for (int c = 0; c < in.c; ++c) {
      const T v = dy(i, c, 0, 0) / static_cast<T>(hw);
      std::fill_n(dx.plane(i, c), hw, v);
    }
  return dx;
}

/// Fully connected layer on N x C x 1 x 1 tensors.
template <typename T>
class Linear {
 public:
  Linear() = default;
  template <typename Rng>
  Linear(int in, int out, Rng& rng) : conv_(ConvSpec::square(in, out, 1), rng) {}

  Tensor<T> forward(const Tensor<T>& x) { return conv_.forward(x); }
  Tensor<T> apply(const Tensor<T>& x) const { return conv_.apply(x); }
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    return conv_.backward(dy, need_input_grad);
  }
  Param<T>& weight() { return conv_.weight(); }
  Param<T>& bias() { return conv_.bias(); }
  void collect(ParamList<T>& out, const std::string& prefix) { conv_.collect(out, prefix); }

 private:
  Conv2d<T> conv_;
};

}  // namespace sola
