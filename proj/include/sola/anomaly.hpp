#pragma once

// Second order local anomaly head: first order predictors (delta), second
// order predictors (phi) and the classifier over the stacked second order maps.

#include <array>
#include <string>

#include "sola/layers.hpp"

namespace sola {

/// Neighbour groups in their fixed stacking order. The "v" groups compare a
/// position with its left neighbour (i, j-d), the "h" groups with its upper
/// neighbour (i-d, j); the digit is the distance d.
enum class Group { v1 = 0, v2 = 1, h1 = 2, h2 = 3 };
inline constexpr std::array<Group, 4> kGroups{Group::v1, Group::v2, Group::h1, Group::h2};
inline constexpr std::array<const char*, 4> kGroupNames{"v1", "v2", "h1", "h2"};

inline int group_distance(Group g) { return (g == Group::v1 || g == Group::h1) ? 1 : 2; }
inline bool group_is_left(Group g) { return g == Group::v1 || g == Group::v2; }

/// Offset (dy, dx) of the designated neighbour.
inline std::pair<int, int> neighbour_offset(Group g) {
  const int d = group_distance(g);
  return group_is_left(g) ? std::pair{0, -d} : std::pair{-d, 0};
}

/// Two-tap convolution pairing each position with its group neighbour.
/// The input is zero-padded on the left/top so the output keeps h x w.
inline ConvSpec paired_conv_spec(Group g, int in, int out) {
  ConvSpec s;
  s.in = in;
  s.out = out;
  const int d = group_distance(g);
  if (group_is_left(g)) {
    s.kh = 1;
    s.kw = 2;
    s.dil_w = d;
    s.pad_left = d;
  } else {
    s.kh = 2;
    s.kw = 1;
    s.dil_h = d;
    s.pad_top = d;
  }
  return s;
}

template <typename T>
struct AnomalyMaps {
  std::array<Tensor<T>, 4> first;   // N x 64 x h x w each, in [0,1]
  std::array<Tensor<T>, 4> second;  // N x 1 x h x w each, in [0,1]
};

/// The four delta (C -> 64) and four phi (64 -> 1) paired convolutions, each
/// followed by a sigmoid.
template <typename T>
class AnomalyPredictorBank {
 public:
  static constexpr int kFirstOrderMaps = 64;

  AnomalyPredictorBank() = default;
  template <typename Rng>
  AnomalyPredictorBank(int in_channels, Rng& rng, int maps = kFirstOrderMaps)
      : in_channels_(in_channels), maps_(maps) {
    for (Group g : kGroups) delta_[idx(g)] = Conv2d<T>(paired_conv_spec(g, in_channels, maps), rng);
    for (Group g : kGroups) phi_[idx(g)] = Conv2d<T>(paired_conv_spec(g, maps, 1), rng);
  }

  int maps() const { return maps_; }
  Conv2d<T>& delta(Group g) { return delta_[idx(g)]; }
  Conv2d<T>& phi(Group g) { return phi_[idx(g)]; }

  std::array<Tensor<T>, 4> predict_first_order(const Tensor<T>& feature) {
    check_feature(feature);
    std::array<Tensor<T>, 4> out;
    for (Group g : kGroups) out[idx(g)] = sd_[idx(g)].forward(delta_[idx(g)].forward(feature));
    return out;
  }

  std::array<Tensor<T>, 4> predict_second_order(const std::array<Tensor<T>, 4>& first) {
    check_first(first);
    std::array<Tensor<T>, 4> out;
    for (Group g : kGroups) out[idx(g)] = sp_[idx(g)].forward(phi_[idx(g)].forward(first[idx(g)]));
    return out;
  }

  AnomalyMaps<T> forward(const Tensor<T>& feature) {
    AnomalyMaps<T> m;
    m.first = predict_first_order(feature);
    m.second = predict_second_order(m.first);
    return m;
  }

  /// Gradients flow into the second order maps and (optionally) directly into
  /// the first order maps; returns the gradient w.r.t. the feature map.
  /// Empty tensors in `d` are treated as zero.
  Tensor<T> backward(const AnomalyMaps<T>& d, bool need_input_grad = true) {
    Tensor<T> dfeature;
    for (Group g : kGroups) {
      const int i = idx(g);
      Tensor<T> dfirst;
      if (!d.second[i].empty()) dfirst = phi_[i].backward(sp_[i].backward(d.second[i]));
      if (!d.first[i].empty()) {
        if (dfirst.empty()) dfirst = d.first[i];
        else dfirst += d.first[i];
      }
      if (dfirst.empty()) continue;
      Tensor<T> df = delta_[i].backward(sd_[i].backward(std::move(dfirst)), need_input_grad);
      if (!need_input_grad) continue;
      if (dfeature.empty()) dfeature = std::move(df);
      else dfeature += df;
    }
    return dfeature;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (Group g : kGroups) delta_[idx(g)].collect(out, prefix + ".delta_" + kGroupNames[idx(g)]);
    for (Group g : kGroups) phi_[idx(g)].collect(out, prefix + ".phi_" + kGroupNames[idx(g)]);
  }

 private:
  static int idx(Group g) { return static_cast<int>(g); }

  void check_feature(const Tensor<T>& f) const {
    if (f.c() != in_channels_)
      throw ShapeError("sola: expected " + std::to_string(in_channels_) + " channels, got " + f.shape().str());
    if (f.h() < 3 || f.w() < 3) throw ShapeError("sola: feature map " + f.shape().str() + " smaller than 3x3");
  }
  void check_first(const std::array<Tensor<T>, 4>& first) const {
    for (const auto& m : first)
      if (m.c() != maps_ || !(m.shape() == first[0].shape()))
        throw ShapeError("sola: first order stack " + m.shape().str() + " (expected " +
                         std::to_string(maps_) + " channels)");
  }

  int in_channels_ = 0, maps_ = kFirstOrderMaps;
  std::array<Conv2d<T>, 4> delta_, phi_;
  std::array<Sigmoid<T>, 4> sd_, sp_;
};

/// Stack the four second order maps (order v1, v2, h1, h2) into N x 4 x h x w.
template <typename T>
Tensor<T> stack_second_order(const std::array<Tensor<T>, 4>& maps) {
  const Shape s = maps[0].shape();
  for (const auto& m : maps)
    if (!(m.shape() == s) || m.c() != 1)
      throw ShapeError("classify: second order maps differ in size: " + m.shape().str() + " vs " + s.str());
  Tensor<T> out(s.n, 4, s.h, s.w);
  for (int i = 0; i < s.n; ++i)
    for (int g = 0; g < 4; ++g) std::copy_n(maps[g].plane(i, 0), out.plane_stride(), out.plane(i, g));
  return out;
}

/// Convolution over the stacked 4-channel anomaly map, global average pooling
/// and a fully connected layer producing one logit per image.
template <typename T>
class ClassifierHead {
 public:
  static constexpr int kHidden = 16;

  ClassifierHead() = default;
  template <typename Rng>
  explicit ClassifierHead(Rng& rng, int hidden = kHidden)
      : conv_(ConvSpec::square(4, hidden, 3, 1, 1), rng), fc_(hidden, 1, rng) {}

  Conv2d<T>& conv() { return conv_; }
  Linear<T>& fc() { return fc_; }

  /// Returns N x 1 x 1 x 1 logits.
  Tensor<T> forward(const std::array<Tensor<T>, 4>& second) {
    Tensor<T> h = relu_.forward(conv_.forward(stack_second_order(second)));
    hidden_shape_ = h.shape();
    return fc_.forward(global_avg_pool(h));
  }

  std::array<Tensor<T>, 4> backward(const Tensor<T>& dlogits) {
    Tensor<T> dh = global_avg_pool_backward(fc_.backward(dlogits), hidden_shape_);
    Tensor<T> dstack = conv_.backward(relu_.backward(std::move(dh)));
    std::array<Tensor<T>, 4> out;
    for (int g = 0; g < 4; ++g) {
      out[g] = Tensor<T>(dstack.n(), 1, dstack.h(), dstack.w());
      for (int i = 0; i < dstack.n(); ++i)
        std::copy_n(dstack.plane(i, g), dstack.plane_stride(), out[g].plane(i, 0));
    }
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    conv_.collect(out, prefix + ".conv");
    fc_.collect(out, prefix + ".fc");
  }

 private:
  Conv2d<T> conv_;
  ReLU<T> relu_;
  Linear<T> fc_;
  Shape hidden_shape_;
};

}  // namespace sola
