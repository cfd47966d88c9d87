#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sola/layers.hpp"
#include "sola/srm.hpp"

namespace sola {

/// How the noise branch's first layer behaves during training.
///   asrm  - SRM init, re-projected onto the constraint set after every step
///   srm   - SRM init, frozen
///   lsrm  - SRM init, learnable without constraint
///   none  - random init, learnable without constraint
enum class ConstraintMode { asrm, srm, lsrm, none };

inline std::string to_string(ConstraintMode m) {
  switch (m) {
    case ConstraintMode::asrm: return "asrm";
    case ConstraintMode::srm: return "srm";
    case ConstraintMode::lsrm: return "lsrm";
    case ConstraintMode::none: return "none";
  }
  return "?";
}

inline ConstraintMode constraint_mode_from_string(const std::string& s) {
  if (s == "asrm") return ConstraintMode::asrm;
  if (s == "srm" || s == "srm-frozen") return ConstraintMode::srm;
  if (s == "lsrm" || s == "lsrm-unconstrained") return ConstraintMode::lsrm;
  if (s == "none") return ConstraintMode::none;
  throw ConfigError("unknown constraint mode '" + s + "' (expected asrm|srm|lsrm|none)");
}

struct ProjectionResult {
  int projected = 0;
  // (out, in) kernel slices whose off-centre sum was degenerate.
  std::vector<std::pair<int, int>> skipped;
};

struct ConstraintViolation {
  double center = 0;      // max |w_center + 1|
  double off_center = 0;  // max |sum(off-centre) - 1|
  bool within(double tol) const { return center <= tol && off_center <= tol; }
};

/// Trainable 5x5 high-pass convolution (no bias) fronting the noise branch.
/// Reflection padding keeps the output aligned with the RGB input.
template <typename T>
class ConstrainedConvLayer {
 public:
  static constexpr double kDegenerateSum = 1e-6;

  ConstrainedConvLayer() = default;

  /// Replicates every bank kernel across `in_channels` inputs; one output
  /// channel per kernel.
  static ConstrainedConvLayer init_from_srm(const srm::FilterBank& bank, int in_channels,
                                            ConstraintMode mode = ConstraintMode::asrm) {
    if (bank.empty()) throw ParameterError("init_from_srm: empty filter bank");
    if (in_channels != 3) throw ParameterError("init_from_srm: expected 3 input channels (RGB)");
    ConstrainedConvLayer layer(static_cast<int>(bank.size()), in_channels, mode);
    auto& w = layer.conv_.weight().value;
    for (int o = 0; o < w.n(); ++o)
      for (int i = 0; i < in_channels; ++i)
        for (int r = 0; r < srm::kKernelSize; ++r)
          for (int c = 0; c < srm::kKernelSize; ++c)
            w(o, i, r, c) = static_cast<T>(bank[o].quantized(r, c));
    return layer;
  }

  template <typename Rng>
  static ConstrainedConvLayer random(int out_channels, int in_channels, Rng& rng) {
    ConstrainedConvLayer layer(out_channels, in_channels, ConstraintMode::none);
    uniform_init(layer.conv_.weight().value, rng, 1.0 / std::sqrt(in_channels * 25.0));
    return layer;
  }

  ConstraintMode mode() const { return mode_; }
  bool constraint_enabled() const { return mode_ == ConstraintMode::asrm; }
  int in_channels() const { return conv_.spec().in; }
  int out_channels() const { return conv_.spec().out; }
  Param<T>& weight() { return conv_.weight(); }
  const Param<T>& weight() const { return conv_.weight(); }

  Tensor<T> forward(const Tensor<T>& x) {
    check(x);
    return conv_.forward(x);
  }
  Tensor<T> apply(const Tensor<T>& x) const {
    check(x);
    return conv_.apply(x);
  }
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = false) {
    return conv_.backward(dy, need_input_grad);
  }

  /// Resets each kernel slice's centre to -1 and rescales the remaining
  /// elements by their signed sum so they total 1. Slices whose off-centre
  /// sum is (near) zero are left untouched and reported.
  ProjectionResult project() {
    ProjectionResult res;
    auto& w = conv_.weight().value;
    for (int o = 0; o < w.n(); ++o)
      for (int i = 0; i < w.c(); ++i) {
        T* k = &w(o, i, 0, 0);
        const int centre = srm::kCenter * srm::kKernelSize + srm::kCenter;
        double off = 0;
        for (int e = 0; e < srm::kKernelSize * srm::kKernelSize; ++e)
          if (e != centre) off += k[e];
        if (std::abs(off) < kDegenerateSum) {
          res.skipped.emplace_back(o, i);
          continue;
        }
        for (int e = 0; e < srm::kKernelSize * srm::kKernelSize; ++e)
          if (e != centre) k[e] = static_cast<T>(k[e] / off);
        k[centre] = T(-1);
        ++res.projected;
      }
    return res;
  }

  ConstraintViolation violation() const { return measure_violation(conv_.weight().value); }

  static ConstraintViolation measure_violation(const Tensor<T>& w) {
    ConstraintViolation v;
    const int centre = srm::kCenter * srm::kKernelSize + srm::kCenter;
    for (int o = 0; o < w.n(); ++o)
      for (int i = 0; i < w.c(); ++i) {
        const T* k = &w(o, i, 0, 0);
        double off = 0;
        for (int e = 0; e < w.h() * w.w(); ++e)
          if (e != centre) off += k[e];
        v.center = std::max(v.center, std::abs(double(k[centre]) + 1.0));
        v.off_center = std::max(v.off_center, std::abs(off - 1.0));
      }
    return v;
  }

  void collect(ParamList<T>& out, const std::string& prefix) { conv_.collect(out, prefix); }

 private:
  ConstrainedConvLayer(int out_channels, int in_channels, ConstraintMode mode) : mode_(mode) {
    ConvSpec s = ConvSpec::square(in_channels, out_channels, srm::kKernelSize, 1, srm::kCenter, false);
    s.padding = Padding::reflect;
    std::mt19937_64 unused(0);
    conv_ = Conv2d<T>(s, unused);
    conv_.weight().trainable = mode != ConstraintMode::srm;
  }

  void check(const Tensor<T>& x) const {
    if (x.c() != conv_.spec().in)
      throw ShapeError("asrm: expected " + std::to_string(conv_.spec().in) + " channels, got " +
                       x.shape().str());
  }

  ConstraintMode mode_ = ConstraintMode::asrm;
  Conv2d<T> conv_;
};

}  // namespace sola
