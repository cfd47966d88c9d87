#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sola/layers.hpp"

namespace sola {

enum class BackboneFamily { resnet18, tiny };

inline std::string to_string(BackboneFamily f) { return f == BackboneFamily::resnet18 ? "resnet18" : "tiny-cnn"; }

inline BackboneFamily backbone_family_from_string(const std::string& s) {
  if (s == "resnet18" || s == "resnet18-style") return BackboneFamily::resnet18;
  if (s == "tiny" || s == "tiny-cnn") return BackboneFamily::tiny;
  throw ConfigError("unknown backbone family '" + s + "' (expected resnet18|tiny-cnn)");
}

/// One stage of a backbone: a block of layers with its own backward pass.
template <typename T>
class Stage {
 public:
  virtual ~Stage() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) = 0;
  virtual void set_training(bool t) = 0;
  virtual void collect(ParamList<T>& out, const std::string& prefix) = 0;
};

inline ConvSpec without_bias(ConvSpec s) {
  s.bias = false;
  return s;
}

/// conv (no bias) -> batch norm -> ReLU.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  template <typename Rng>
  ConvBnRelu(ConvSpec spec, Rng& rng) : conv_(without_bias(spec), rng), bn_(spec.out) {}

  Tensor<T> forward(const Tensor<T>& x) { return relu_.forward(bn_.forward(conv_.forward(x))); }
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) {
    return conv_.backward(bn_.backward(relu_.backward(dy)), need_input_grad);
  }
  void set_training(bool t) { bn_.set_training(t); }
  void collect(ParamList<T>& out, const std::string& prefix) {
    conv_.collect(out, prefix + ".conv");
    bn_.collect(out, prefix + ".bn");
  }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  ReLU<T> relu_;
};

/// One or more 3x3 conv/BN/ReLU layers; the last one carries the stride of
/// the stage (1x1 when the stage does not downsample).
template <typename T>
class TinyStage final : public Stage<T> {
 public:
  template <typename Rng>
  TinyStage(int in, int out, int stride, bool stem, Rng& rng) {
    if (stem) {
      blocks_.emplace_back(ConvSpec::square(in, out / 2, 3, 2, 1, false), rng);
      in = out / 2;
    }
    const int k = stride == 1 ? 1 : 3;
    blocks_.emplace_back(ConvSpec::square(in, out, k, stride, k / 2, false), rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = blocks_[0].forward(x);
    for (std::size_t i = 1; i < blocks_.size(); ++i) y = blocks_[i].forward(y);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) override {
    Tensor<T> d = dy;
    for (std::size_t i = blocks_.size(); i-- > 0;) d = blocks_[i].backward(d, i > 0 || need_input_grad);
    return d;
  }
  void set_training(bool t) override {
    for (auto& b : blocks_) b.set_training(t);
  }
  void collect(ParamList<T>& out, const std::string& prefix) override {
    if (blocks_.size() == 1) {
      blocks_[0].collect(out, prefix);
      return;
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".conv" + std::to_string(i + 1));
  }

 private:
  std::vector<ConvBnRelu<T>> blocks_;
};

/// ResNet basic block: two 3x3 conv/BN pairs with an identity or 1x1
/// projection shortcut, ReLU after the sum.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  template <typename Rng>
  BasicBlock(int in, int out, int stride, Rng& rng)
      : conv1_(ConvSpec::square(in, out, 3, stride, 1, false), rng),
        bn1_(out),
        conv2_(ConvSpec::square(out, out, 3, 1, 1, false), rng),
        bn2_(out),
        project_(stride != 1 || in != out) {
    if (project_) {
      down_ = Conv2d<T>(ConvSpec::square(in, out, 1, stride, 0, false), rng);
      down_bn_ = BatchNorm2d<T>(out);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y = bn2_.forward(conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x)))));
    y += project_ ? down_bn_.forward(down_.forward(x)) : x;
    return relu2_.forward(std::move(y));
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) {
    Tensor<T> d = relu2_.backward(dy);
    Tensor<T> dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(d)))),
                                   need_input_grad);
    if (project_) {
      Tensor<T> ds = down_.backward(down_bn_.backward(d), need_input_grad);
      if (need_input_grad) dx += ds;
    } else if (need_input_grad) {
      dx += d;
    }
    return dx;
  }

  void set_training(bool t) {
    bn1_.set_training(t);
    bn2_.set_training(t);
    if (project_) down_bn_.set_training(t);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    conv1_.collect(out, prefix + ".conv1");
    bn1_.collect(out, prefix + ".bn1");
    conv2_.collect(out, prefix + ".conv2");
    bn2_.collect(out, prefix + ".bn2");
    if (project_) {
      down_.collect(out, prefix + ".downsample.conv");
      down_bn_.collect(out, prefix + ".downsample.bn");
    }
  }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  ReLU<T> relu1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  ReLU<T> relu2_;
  bool project_ = false;
  Conv2d<T> down_;
  BatchNorm2d<T> down_bn_;
};

/// One ResNet18 layer (two basic blocks); the first stage also owns the
/// 7x7 stem and max pooling.
template <typename T>
class ResNetStage final : public Stage<T> {
 public:
  template <typename Rng>
  ResNetStage(int in, int out, int stride, bool stem, Rng& rng) : stem_(stem) {
    if (stem_) {
      stem_block_ = ConvBnRelu<T>(ConvSpec::square(in, out, 7, 2, 3, false), rng);
      pool_ = MaxPool2d<T>(3, 2, 1);
      in = out;
    }
    b1_ = BasicBlock<T>(in, out, stride, rng);
    b2_ = BasicBlock<T>(out, out, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = stem_ ? pool_.forward(stem_block_.forward(x)) : x;
    return b2_.forward(b1_.forward(y));
  }
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad) override {
    Tensor<T> d = b1_.backward(b2_.backward(dy, true), stem_ || need_input_grad);
    if (stem_) d = stem_block_.backward(pool_.backward(d), need_input_grad);
    return d;
  }
  void set_training(bool t) override {
    if (stem_) stem_block_.set_training(t);
    b1_.set_training(t);
    b2_.set_training(t);
  }
  void collect(ParamList<T>& out, const std::string& prefix) override {
    if (stem_) stem_block_.collect(out, prefix + ".stem");
    b1_.collect(out, prefix + ".block1");
    b2_.collect(out, prefix + ".block2");
  }

 private:
  bool stem_ = false;
  ConvBnRelu<T> stem_block_;
  MaxPool2d<T> pool_;
  BasicBlock<T> b1_, b2_;
};

struct BackboneSpec {
  BackboneFamily family = BackboneFamily::resnet18;
  int stages_used = 3;
  std::vector<int> widths{64, 128, 256, 512};
  int grid = 16;
  int input_size = 256;

  /// ResNet18 layers 1-3 pooled to a 16x16 grid of 256-d features.
  static BackboneSpec resnet18() { return {}; }

  /// Desk-scale backbone: four conv stages (32-64-128-256). Stage 1 is two
  /// stride-2 3x3 convs, stages 2-3 one stride-2 3x3 conv each and stage 4 a
  /// 1x1 conv, giving 16x16 features for a 256 input.
  static BackboneSpec tiny() { return {BackboneFamily::tiny, 4, {32, 64, 128, 256}, 16, 256}; }

  int max_stages() const { return 4; }
  int feature_channels() const { return widths.at(static_cast<std::size_t>(stages_used - 1)); }

  /// Spatial size of the output of stage `s` (1-based) for the configured input.
  int stage_resolution(int s) const {
    int r = input_size;
    if (family == BackboneFamily::tiny) {
      static constexpr int strides[4] = {4, 2, 2, 1};
      for (int i = 0; i < s; ++i) r /= strides[i];
    } else {
      r /= 4;  // stem conv + max pool
      for (int i = 1; i < s; ++i) r /= 2;
    }
    return r;
  }

  void validate() const {
    if (stages_used < 1 || stages_used > max_stages())
      throw ConfigError("backbone: stages_used must be in [1, 4], got " + std::to_string(stages_used));
    if (static_cast<int>(widths.size()) != max_stages())
      throw ConfigError("backbone: expected 4 stage widths");
    if (grid != 8 && grid != 16 && grid != 32)
      throw ConfigError("backbone: grid must be 8, 16 or 32, got " + std::to_string(grid));
    if (input_size <= 0 || input_size % grid != 0)
      throw ConfigError("backbone: input size " + std::to_string(input_size) + " not divisible by grid");
    const int r = stage_resolution(stages_used);
    if (r < 1 || (r % grid != 0 && grid % r != 0))
      throw ConfigError("backbone: final stage resolution " + std::to_string(r) +
                        " is incompatible with grid " + std::to_string(grid));
  }
};

template <typename T, typename Rng>
std::vector<std::unique_ptr<Stage<T>>> make_backbone(const BackboneSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::unique_ptr<Stage<T>>> stages;
  int in = 3;
  for (int s = 0; s < spec.stages_used; ++s) {
    const int out = spec.widths[s];
    if (spec.family == BackboneFamily::tiny) {
      static constexpr int strides[4] = {2, 2, 2, 1};
      stages.push_back(std::make_unique<TinyStage<T>>(in, out, strides[s], s == 0, rng));
    } else {
      stages.push_back(std::make_unique<ResNetStage<T>>(in, out, s == 0 ? 1 : 2, s == 0, rng));
    }
    in = out;
  }
  return stages;
}

}  // namespace sola
