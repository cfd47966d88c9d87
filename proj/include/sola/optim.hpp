#pragma once

#include <cmath>
#include <vector>

#include "sola/layers.hpp"

namespace sola {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Buffers and frozen parameters are skipped.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.param->value.size(), 0.0);
      v_.emplace_back(p.param->value.size(), 0.0);
    }
  }

  long long steps() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& np = params_[k];
      if (np.buffer || !np.param->trainable) continue;
      auto& w = np.param->value;
      const auto& g = np.param->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

 private:
  ParamList<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

}  // namespace sola
