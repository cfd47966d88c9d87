#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sola/layers.hpp"

namespace sola {

/// Squeeze-excitation channel gate: GAP -> FC(C -> C/r) -> ReLU -> FC -> sigmoid,
/// then every channel is scaled by its gate.
template <typename T>
class ChannelAttention {
 public:
  static constexpr int kReduction = 16;

  ChannelAttention() = default;
  template <typename Rng>
  ChannelAttention(int channels, Rng& rng)
      : channels_(channels),
        fc1_(channels, std::max(1, channels / kReduction), rng),
        fc2_(std::max(1, channels / kReduction), channels, rng) {}

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    Tensor<T> z = fc1_.forward(global_avg_pool(x));
    hidden_ = relu_.forward(std::move(z));
    gates_ = gate_.forward(fc2_.forward(hidden_));
    return scale(x, gates_);
  }

  Tensor<T> apply(const Tensor<T>& x) const { return scale(x, gates(x)); }

  /// Gate values in (0, 1), shaped N x C x 1 x 1.
  Tensor<T> gates(const Tensor<T>& x) const {
    Tensor<T> z = fc1_.apply(global_avg_pool(x));
    for (auto& v : z.vec()) v = std::max(v, T(0));
    Tensor<T> g = fc2_.apply(z);
    for (auto& v : g.vec()) v = sigmoid(v);
    return g;
  }
  const Tensor<T>& last_gates() const { return gates_; }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const std::size_t hw = x.plane_stride();
    Tensor<T> dx(x.shape());
    Tensor<T> dgate(x.n(), x.c(), 1, 1);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* g = dy.plane(i, c);
        const T* p = x.plane(i, c);
        T* d = dx.plane(i, c);
        const T s = gates_(i, c, 0, 0);
        T acc = 0;
        for (std::size_t k = 0; k < hw; ++k) {
          acc += g[k] * p[k];
          d[k] = g[k] * s;
        }
        dgate(i, c, 0, 0) = acc;
      }
    Tensor<T> dpooled = fc1_.backward(relu_.backward(fc2_.backward(gate_.backward(dgate))));
    dx += global_avg_pool_backward(dpooled, x.shape());
    return dx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    fc1_.collect(out, prefix + ".fc1");
    fc2_.collect(out, prefix + ".fc2");
  }

 private:
  static Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& g) {
    Tensor<T> y(x.shape());
    const std::size_t hw = x.plane_stride();
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T s = g(i, c, 0, 0);
        const T* p = x.plane(i, c);
        T* q = y.plane(i, c);
        for (std::size_t k = 0; k < hw; ++k) q[k] = p[k] * s;
      }
    return y;
  }

  int channels_ = 0;
  Linear<T> fc1_, fc2_;
  ReLU<T> relu_;
  Sigmoid<T> gate_;
  Tensor<T> input_, hidden_, gates_;
};

/// Dual channel attention fusion of an RGB-branch and a noise-branch feature
/// map: gate the noise features, concatenate with RGB, project back to the
/// RGB width with a 1x1 convolution, gate again.
template <typename T>
class DcamBlock {
 public:
  DcamBlock() = default;
  template <typename Rng>
  DcamBlock(int channels, Rng& rng)
      : channels_(channels),
        pre_(channels, rng),
        proj_(ConvSpec::square(2 * channels, channels, 1), rng),
        post_(channels, rng) {}

  int channels() const { return channels_; }

  Tensor<T> forward(const Tensor<T>& rgb, const Tensor<T>& noise) {
    check(rgb, noise);
    return post_.forward(proj_.forward(concat_channels(rgb, pre_.forward(noise))));
  }

  struct Grads {
    Tensor<T> rgb, noise;
  };

  Grads backward(const Tensor<T>& dy) {
    Tensor<T> dcat = proj_.backward(post_.backward(dy));
    Grads g;
    Tensor<T> dgated;
    split_channels(dcat, channels_, g.rgb, dgated);
    g.noise = pre_.backward(dgated);
    return g;
  }

  ChannelAttention<T>& pre_attention() { return pre_; }
  ChannelAttention<T>& post_attention() { return post_; }

  void collect(ParamList<T>& out, const std::string& prefix) {
    pre_.collect(out, prefix + ".pre_attention");
    proj_.collect(out, prefix + ".fusion");
    post_.collect(out, prefix + ".post_attention");
  }

 private:
  void check(const Tensor<T>& rgb, const Tensor<T>& noise) const {
    if (!(rgb.shape() == noise.shape()) || rgb.c() != channels_)
      throw ShapeError("dcam: rgb " + rgb.shape().str() + " vs noise " + noise.shape().str() +
                       " (block width " + std::to_string(channels_) + ")");
  }

  int channels_ = 0;
  ChannelAttention<T> pre_;
  Conv2d<T> proj_;
  ChannelAttention<T> post_;
};

/// Patch-wise self-attention with a residual, learnable scale. The feature map
/// is cut into a grid x grid array of non-overlapping patches; inside each
/// patch every position attends to every other position of the same patch.
template <typename T>
class LemBlock {
 public:
  static constexpr int kDefaultGrid = 16;

  LemBlock() = default;
  template <typename Rng>
  LemBlock(int channels, Rng& rng, int grid = kDefaultGrid)
      : channels_(channels),
        grid_(grid),
        theta_(ConvSpec::square(channels, std::max(1, channels / 2), 1), rng),
        f_(ConvSpec::square(channels, std::max(1, channels / 2), 1), rng),
        g_(ConvSpec::square(channels, channels, 1), rng) {
    lambda_ = Param<T>(Shape{1, 1, 1, 1});
  }

  int grid() const { return grid_; }
  Param<T>& lambda() { return lambda_; }
  T lambda_value() const { return lambda_.value[0]; }
  void set_lambda(T v) { lambda_.value[0] = v; }

  Tensor<T> forward(const Tensor<T>& x) {
    check(x);
    input_shape_ = x.shape();
    tq_ = theta_.forward(x);
    tk_ = f_.forward(x);
    tv_ = g_.forward(x);
    attn_.clear();
    enhanced_ = Tensor<T>(x.shape());
    run(tq_, tk_, tv_, enhanced_, &attn_);
    Tensor<T> y = x;
    const T lam = lambda_.value[0];
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += lam * enhanced_[i];
    return y;
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    check(x);
    Tensor<T> e(x.shape());
    run(theta_.apply(x), f_.apply(x), g_.apply(x), e, nullptr);
    Tensor<T> y = x;
    const T lam = lambda_.value[0];
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += lam * e[i];
    return y;
  }

  /// Attention matrices of the last forward pass, one n x n matrix per
  /// (sample, patch) with n positions per patch. Rows sum to one.
  const std::vector<RowMatrix<T>>& attention() const { return attn_; }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Shape& s = input_shape_;
    const T lam = lambda_.value[0];
    if (lambda_.trainable) lambda_.grad[0] += ordered_dot(dy.data(), enhanced_.data(), dy.size());
    Tensor<T> dq(tq_.shape()), dk(tk_.shape()), dv(tv_.shape());
    const int ph = s.h / grid_, pw = s.w / grid_, n = ph * pw;
    const int cq = tq_.c(), cv = tv_.c();
    // Patches hold only a handful of vectors, so the products below are tiny:
    // coefficient-wise lazy products into reused buffers beat GEMM set-up.
    RowMatrix<T> q(n, cq), k(n, cq), v(n, cv), de(n, cv), dw(n, n), ds(n, n), dqp(n, cq), dkp(n, cq), dvp(n, cv);
    std::size_t a = 0;
    for (int b = 0; b < s.n; ++b)
      for (int gy = 0; gy < grid_; ++gy)
        for (int gx = 0; gx < grid_; ++gx, ++a) {
          gather(tq_, b, gy, gx, ph, pw, q);
          gather(tk_, b, gy, gx, ph, pw, k);
          gather(tv_, b, gy, gx, ph, pw, v);
          gather(dy, b, gy, gx, ph, pw, de);
          de *= lam;
          const RowMatrix<T>& w = attn_[a];
          // e = W v, W = softmax_row(q k^T)
          dw.noalias() = de.lazyProduct(v.transpose());
          dvp.noalias() = w.transpose().lazyProduct(de);
          for (int r = 0; r < n; ++r) {
            const T dot = (dw.row(r).array() * w.row(r).array()).sum();
            ds.row(r) = w.row(r).array() * (dw.row(r).array() - dot);
          }
          dqp.noalias() = ds.lazyProduct(k);
          dkp.noalias() = ds.transpose().lazyProduct(q);
          scatter(dqp, b, gy, gx, ph, pw, dq);
          scatter(dkp, b, gy, gx, ph, pw, dk);
          scatter(dvp, b, gy, gx, ph, pw, dv);
        }
    Tensor<T> dx = dy;
    dx += theta_.backward(dq);
    dx += f_.backward(dk);
    dx += g_.backward(dv);
    return dx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    theta_.collect(out, prefix + ".theta");
    f_.collect(out, prefix + ".f");
    g_.collect(out, prefix + ".g");
    out.push_back({prefix + ".lambda", &lambda_});
  }

 private:
  void check(const Tensor<T>& x) const {
    if (x.c() != channels_) throw ShapeError("lem: channel mismatch " + x.shape().str());
    if (x.h() % grid_ != 0 || x.w() % grid_ != 0)
      throw ShapeError("lem: spatial size " + x.shape().str() + " not divisible by grid " +
                       std::to_string(grid_));
  }

  // Rows of `m` are the feature vectors of one patch in raster order.
  static void gather(const Tensor<T>& t, int b, int gy, int gx, int ph, int pw, RowMatrix<T>& m) {
    for (int c = 0; c < t.c(); ++c) {
      const T* p = t.plane(b, c);
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) m(y * pw + x, c) = p[(gy * ph + y) * t.w() + gx * pw + x];
    }
  }
  static void scatter(const RowMatrix<T>& m, int b, int gy, int gx, int ph, int pw, Tensor<T>& t) {
    for (int c = 0; c < t.c(); ++c) {
      T* p = t.plane(b, c);
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) p[(gy * ph + y) * t.w() + gx * pw + x] += m(y * pw + x, c);
    }
  }

  void run(const Tensor<T>& tq, const Tensor<T>& tk, const Tensor<T>& tv, Tensor<T>& out,
           std::vector<RowMatrix<T>>* keep) const {
    const int ph = tq.h() / grid_, pw = tq.w() / grid_, n = ph * pw;
    RowMatrix<T> q(n, tq.c()), k(n, tk.c()), v(n, tv.c()), e(n, tv.c());
    if (keep) keep->reserve(keep->size() + static_cast<std::size_t>(tq.n()) * grid_ * grid_);
    for (int b = 0; b < tq.n(); ++b)
      for (int gy = 0; gy < grid_; ++gy)
        for (int gx = 0; gx < grid_; ++gx) {
          gather(tq, b, gy, gx, ph, pw, q);
          gather(tk, b, gy, gx, ph, pw, k);
          gather(tv, b, gy, gx, ph, pw, v);
          RowMatrix<T> w = q.lazyProduct(k.transpose());
          for (int r = 0; r < n; ++r) {
            const T mx = w.row(r).maxCoeff();
            w.row(r) = (w.row(r).array() - mx).exp();
            w.row(r) /= w.row(r).sum();
          }
          e.noalias() = w.lazyProduct(v);
          scatter(e, b, gy, gx, ph, pw, out);
          if (keep) keep->push_back(std::move(w));
        }
  }

  int channels_ = 0;
  int grid_ = kDefaultGrid;
  Conv2d<T> theta_, f_, g_;
  Param<T> lambda_;
  Shape input_shape_;
  Tensor<T> tq_, tk_, tv_, enhanced_;
  std::vector<RowMatrix<T>> attn_;
};

}  // namespace sola
