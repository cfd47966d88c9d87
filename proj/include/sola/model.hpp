#pragma once

// Two-branch detector: RGB backbone and an ASRM-fronted noise backbone fused
// by DCAM after every stage, optional LEM enhancement, pooling to the feature
// grid and the second order local anomaly head.

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sola/anomaly.hpp"
#include "sola/asrm.hpp"
#include "sola/attention.hpp"
#include "sola/backbone.hpp"

namespace sola {

enum class HeadKind { sola, plain };

inline std::string to_string(HeadKind h) { return h == HeadKind::sola ? "sola" : "plain"; }
inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "sola") return HeadKind::sola;
  if (s == "plain") return HeadKind::plain;
  throw ConfigError("unknown head '" + s + "' (expected sola|plain)");
}

struct ModelFlags {
  bool use_noise_branch = true;
  bool use_lem = true;
  ConstraintMode constraint = ConstraintMode::asrm;
  std::vector<int> lem_stages{2, 3};  // 1-based stage indices
  /// When set, the noise branch continues from the fused features instead of
  /// its own stream after every stage.
  bool noise_consumes_fused = false;
  /// `plain` swaps the anomaly head for GAP + FC over the pooled features
  /// (baseline classifier).
  HeadKind head = HeadKind::sola;

  /// Plain tiny-backbone classifier: no noise branch, no LEM, no SOLA.
  static ModelFlags plain_classifier() {
    ModelFlags f;
    f.use_noise_branch = false;
    f.use_lem = false;
    f.constraint = ConstraintMode::none;
    f.head = HeadKind::plain;
    return f;
  }
};

template <typename T>
struct ModelOutput {
  AnomalyMaps<T> maps;  // empty for the plain head
  Tensor<T> logits;     // N x 1 x 1 x 1
  Tensor<T> features;   // pooled grid features fed to the head
};

template <typename T>
struct ModelGrads {
  AnomalyMaps<T> dmaps;
  Tensor<T> dlogits;
};

template <typename T>
class SolaModel {
 public:
  SolaModel(const BackboneSpec& spec, const ModelFlags& flags, std::uint64_t seed = 0)
      : spec_(spec), flags_(flags) {
    spec_.validate();
    for (int s : flags_.lem_stages)
      if (s < 1 || s > spec_.stages_used)
        throw ConfigError("model: LEM stage " + std::to_string(s) + " outside [1, " +
                          std::to_string(spec_.stages_used) + "]");
    std::mt19937_64 rng(seed);
    rgb_ = make_backbone<T>(spec_, rng);
    if (flags_.use_noise_branch) {
      if (flags_.constraint == ConstraintMode::none)
        asrm_ = ConstrainedConvLayer<T>::random(3, 3, rng);
      else
        asrm_ = ConstrainedConvLayer<T>::init_from_srm(srm::builtin_srm_bank(), 3, flags_.constraint);
      noise_ = make_backbone<T>(spec_, rng);
      for (int s = 0; s < spec_.stages_used; ++s) dcam_.emplace_back(spec_.widths[s], rng);
    }
    if (flags_.use_lem)
      for (int s : flags_.lem_stages) {
        const int res = spec_.stage_resolution(s);
        if (res % LemBlock<T>::kDefaultGrid != 0)
          throw ConfigError("model: LEM after stage " + std::to_string(s) + " needs a resolution divisible by 16, got " +
                            std::to_string(res));
        lem_.emplace(s - 1, LemBlock<T>(spec_.widths[s - 1], rng));
      }
    pool_ = AdaptiveAvgPool2d<T>(spec_.grid, spec_.grid);
    const int c = spec_.feature_channels();
    if (flags_.head == HeadKind::sola) {
      bank_ = AnomalyPredictorBank<T>(c, rng);
      classifier_ = ClassifierHead<T>(rng);
    } else {
      plain_fc_ = Linear<T>(c, 1, rng);
    }
    collect_all();
  }

  SolaModel(const SolaModel&) = delete;
  SolaModel& operator=(const SolaModel&) = delete;

  const BackboneSpec& spec() const { return spec_; }
  const ModelFlags& flags() const { return flags_; }
  ParamList<T>& params() { return params_; }
  bool training() const { return training_; }

  void set_training(bool t) {
    training_ = t;
    for (auto& s : rgb_) s->set_training(t);
    for (auto& s : noise_) s->set_training(t);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!p.buffer) n += p.param->value.size();
    return n;
  }

  bool has_noise_branch() const { return flags_.use_noise_branch; }
  ConstrainedConvLayer<T>& asrm() { return asrm_; }
  AnomalyPredictorBank<T>& anomaly_bank() { return bank_; }
  ClassifierHead<T>& classifier() { return classifier_; }
  LemBlock<T>* lem(int stage) {
    auto it = lem_.find(stage - 1);
    return it == lem_.end() ? nullptr : &it->second;
  }

  /// Layers whose activations can be inspected (e.g. for Grad-CAM).
  std::vector<std::string> layer_names() const {
    std::vector<std::string> out;
    for (int s = 1; s <= spec_.stages_used; ++s) out.push_back("stage" + std::to_string(s));
    out.push_back("features");
    return out;
  }

  void set_capture(bool on) { capture_ = on; }
  const Tensor<T>& activation(const std::string& name) const { return lookup(activations_, name); }
  const Tensor<T>& activation_grad(const std::string& name) const { return lookup(activation_grads_, name); }

  /// Images: N x 3 x S x S with values in [0, 1].
  ModelOutput<T> forward(const Tensor<T>& images) {
    validate_input(images);
    if (capture_) activations_.clear();
    Tensor<T> xr = images, xn, f;
    if (flags_.use_noise_branch) xn = asrm_.forward(images);
    for (int s = 0; s < spec_.stages_used; ++s) {
      xr = rgb_[s]->forward(xr);
      if (flags_.use_noise_branch) {
        xn = noise_[s]->forward(xn);
        f = dcam_[s].forward(xr, xn);
      } else {
        f = std::move(xr);
      }
      if (auto it = lem_.find(s); it != lem_.end()) f = it->second.forward(f);
      if (capture_) activations_["stage" + std::to_string(s + 1)] = f;
      if (flags_.use_noise_branch && flags_.noise_consumes_fused) xn = f;
      xr = f;
    }
    ModelOutput<T> out;
    out.features = pool_.forward(xr);
    if (capture_) activations_["features"] = out.features;
    if (flags_.head == HeadKind::sola) {
      out.maps = bank_.forward(out.features);
      out.logits = classifier_.forward(out.maps.second);
    } else {
      features_shape_ = out.features.shape();
      out.logits = plain_fc_.forward(global_avg_pool(out.features));
    }
    return out;
  }

  /// Accumulates parameter gradients for the last forward pass.
  void backward(const ModelGrads<T>& g) {
    Tensor<T> dfeat;
    if (flags_.head == HeadKind::sola) {
      AnomalyMaps<T> d = g.dmaps;
      std::array<Tensor<T>, 4> dsecond = classifier_.backward(g.dlogits);
      for (int k = 0; k < 4; ++k) {
        if (d.second[k].empty()) d.second[k] = std::move(dsecond[k]);
        else d.second[k] += dsecond[k];
      }
      dfeat = bank_.backward(d);
    } else {
      dfeat = global_avg_pool_backward(plain_fc_.backward(g.dlogits), features_shape_);
    }
    if (capture_) activation_grads_["features"] = dfeat;
    Tensor<T> df = pool_.backward(dfeat);
    Tensor<T> dnoise;  // gradient w.r.t. the noise-stream input of stage s+1
    for (int s = spec_.stages_used - 1; s >= 0; --s) {
      if (flags_.use_noise_branch && flags_.noise_consumes_fused && !dnoise.empty()) df += dnoise;
      if (capture_) activation_grads_["stage" + std::to_string(s + 1)] = df;
      if (auto it = lem_.find(s); it != lem_.end()) df = it->second.backward(df);
      Tensor<T> drgb;
      if (flags_.use_noise_branch) {
        auto dg = dcam_[s].backward(df);
        drgb = std::move(dg.rgb);
        Tensor<T> dn = std::move(dg.noise);
        if (!flags_.noise_consumes_fused && !dnoise.empty()) dn += dnoise;
        dnoise = noise_[s]->backward(dn, true);
      } else {
        drgb = std::move(df);
      }
      df = rgb_[s]->backward(drgb, s > 0);
    }
    if (flags_.use_noise_branch) asrm_.backward(dnoise, false);
  }

  void zero_grad() {
    for (auto& p : params_)
      if (!p.buffer) p.param->zero_grad();
  }

  /// Applies the ASRM constraint (only in asrm mode).
  ProjectionResult project() {
    if (flags_.use_noise_branch && asrm_.constraint_enabled()) return asrm_.project();
    return {};
  }

 private:
  void collect_all() {
    params_.clear();
    if (flags_.use_noise_branch) asrm_.collect(params_, "asrm");
    for (int s = 0; s < spec_.stages_used; ++s) rgb_[s]->collect(params_, "rgb.stage" + std::to_string(s + 1));
    for (int s = 0; s < static_cast<int>(noise_.size()); ++s)
      noise_[s]->collect(params_, "noise.stage" + std::to_string(s + 1));
    for (int s = 0; s < static_cast<int>(dcam_.size()); ++s) dcam_[s].collect(params_, "dcam" + std::to_string(s + 1));
    for (auto& [s, l] : lem_) l.collect(params_, "lem" + std::to_string(s + 1));
    if (flags_.head == HeadKind::sola) {
      bank_.collect(params_, "sola");
      classifier_.collect(params_, "classifier");
    } else {
      plain_fc_.collect(params_, "plain.fc");
    }
  }

  void validate_input(const Tensor<T>& x) const {
    if (x.c() != 3 || x.h() != spec_.input_size || x.w() != spec_.input_size)
      throw ValidationError("model: expected N x 3 x " + std::to_string(spec_.input_size) + " x " +
                            std::to_string(spec_.input_size) + " images, got " + x.shape().str());
    for (T v : x.vec())
      if (!(v >= T(0) && v <= T(1))) throw ValidationError("model: input values must lie in [0, 1]");
  }

  static const Tensor<T>& lookup(const std::map<std::string, Tensor<T>>& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw ParameterError("no captured tensor for layer '" + name + "'");
    return it->second;
  }

  BackboneSpec spec_;
  ModelFlags flags_;
  bool training_ = true;
  bool capture_ = false;
  ConstrainedConvLayer<T> asrm_;
  std::vector<std::unique_ptr<Stage<T>>> rgb_, noise_;
  std::vector<DcamBlock<T>> dcam_;
  std::map<int, LemBlock<T>> lem_;
  AdaptiveAvgPool2d<T> pool_;
  AnomalyPredictorBank<T> bank_;
  ClassifierHead<T> classifier_;
  Linear<T> plain_fc_;
  Shape features_shape_;
  ParamList<T> params_;
  std::map<std::string, Tensor<T>> activations_, activation_grads_;
};

}  // namespace sola
