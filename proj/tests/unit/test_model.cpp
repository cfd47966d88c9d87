#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "sola/checkpoint.hpp"
#include "sola/model.hpp"
#include "sola/optim.hpp"
#include "sola/supervision.hpp"
#include "test_util.hpp"

using namespace sola;

namespace {

template <typename T>
Tensor<T> images(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor<T>({n, 3, size, size}, rng, T(0), T(1));
}

template <typename T>
Param<T>* find(SolaModel<T>& m, const std::string& name) {
  for (auto& p : m.params())
    if (p.name == name) return p.param;
  return nullptr;
}

bool has_prefix(const ParamList<float>& ps, const std::string& prefix) {
  for (const auto& p : ps)
    if (p.name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST(Model, DefaultResNetGivesSixteenBySixteenBy256Features) {
  SolaModel<float> m(BackboneSpec::resnet18(), ModelFlags{}, 1);
  m.set_training(false);
  const auto out = m.forward(images<float>(1, 256, 1));
  EXPECT_EQ(out.features.shape(), (Shape{1, 256, 16, 16}));
  for (int g = 0; g < 4; ++g) {
    EXPECT_EQ(out.maps.first[g].shape(), (Shape{1, 64, 16, 16}));
    EXPECT_EQ(out.maps.second[g].shape(), (Shape{1, 1, 16, 16}));
  }
  EXPECT_EQ(out.logits.shape(), (Shape{1, 1, 1, 1}));
}

TEST(Model, GridEightAndThirtyTwo) {
  for (int grid : {8, 32}) {
    BackboneSpec s = BackboneSpec::resnet18();
    s.grid = grid;
    SolaModel<float> m(s, ModelFlags{}, 2);
    m.set_training(false);
    const auto out = m.forward(images<float>(1, 256, 2));
    EXPECT_EQ(out.features.shape(), (Shape{1, 256, grid, grid}));
    EXPECT_EQ(out.maps.second[0].shape(), (Shape{1, 1, grid, grid}));
  }
}

TEST(Model, TinyBackboneKeepsContractWithFarFewerParameters) {
  SolaModel<float> tiny(BackboneSpec::tiny(), ModelFlags{}, 3);
  SolaModel<float> big(BackboneSpec::resnet18(), ModelFlags{}, 3);
  const auto out = tiny.forward(images<float>(4, 256, 3));
  EXPECT_EQ(out.features.shape(), (Shape{4, 256, 16, 16}));
  EXPECT_EQ(out.logits.n(), 4);
  EXPECT_EQ(out.maps.first[2].n(), 4);
  EXPECT_LT(tiny.parameter_count() * 8, big.parameter_count());
}

TEST(Model, ConfigurationErrors) {
  BackboneSpec s = BackboneSpec::tiny();
  s.grid = 12;
  EXPECT_THROW(SolaModel<float>(s, ModelFlags{}), ConfigError);
  s = BackboneSpec::tiny();
  s.stages_used = 5;
  EXPECT_THROW(SolaModel<float>(s, ModelFlags{}), ConfigError);
  ModelFlags f;
  f.lem_stages = {4, 5};
  EXPECT_THROW(SolaModel<float>(BackboneSpec::tiny(), f), ConfigError);
  s = BackboneSpec::tiny();
  s.input_size = 128;  // stage 3 is then 8x8, too small for 16x16 LEM patches
  EXPECT_THROW(SolaModel<float>(s, ModelFlags{}), ConfigError);
}

TEST(Model, InputValidation) {
  SolaModel<float> m(BackboneSpec::tiny(), ModelFlags{}, 4);
  Tensor<float> x = images<float>(1, 256, 4);
  x[10] = 1.5f;
  EXPECT_THROW(m.forward(x), ValidationError);
  EXPECT_THROW(m.forward(images<float>(1, 128, 4)), ValidationError);
  EXPECT_THROW(m.forward(Tensor<float>(1, 1, 256, 256)), ValidationError);
}

TEST(Model, EvaluationModeIsDeterministicAndBatchIndependent) {
  SolaModel<float> m(BackboneSpec::tiny(), ModelFlags{}, 5);
  m.set_training(false);
  Tensor<float> x = images<float>(3, 256, 5);
  std::copy_n(x.sample(0), x.sample_stride(), x.sample(2));  // duplicate image 0 at index 2
  const auto a = m.forward(x), b = m.forward(x);
  EXPECT_EQ(a.logits.vec(), b.logits.vec());
  EXPECT_EQ(a.maps.second[3].vec(), b.maps.second[3].vec());
  EXPECT_EQ(a.logits[0], a.logits[2]);
  for (int g = 0; g < 4; ++g)
    for (int k = 0; k < 256; ++k) EXPECT_EQ(a.maps.second[g].plane(0, 0)[k], a.maps.second[g].plane(2, 0)[k]);
}

TEST(Model, SameSeedSameWeights) {
  SolaModel<float> a(BackboneSpec::tiny(), ModelFlags{}, 6), b(BackboneSpec::tiny(), ModelFlags{}, 6);
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    EXPECT_EQ(a.params()[i].param->value.vec(), b.params()[i].param->value.vec()) << a.params()[i].name;
}

TEST(Model, AblationFlagsRemoveComponents) {
  ModelFlags f;
  f.use_noise_branch = false;
  SolaModel<float> no_noise(BackboneSpec::tiny(), f, 7);
  EXPECT_FALSE(has_prefix(no_noise.params(), "asrm"));
  EXPECT_FALSE(has_prefix(no_noise.params(), "noise."));
  EXPECT_FALSE(has_prefix(no_noise.params(), "dcam"));
  EXPECT_TRUE(has_prefix(no_noise.params(), "lem2"));

  f = ModelFlags{};
  f.use_lem = false;
  SolaModel<float> no_lem(BackboneSpec::tiny(), f, 7);
  EXPECT_FALSE(has_prefix(no_lem.params(), "lem"));
  EXPECT_TRUE(has_prefix(no_lem.params(), "asrm"));

  SolaModel<float> plain(BackboneSpec::tiny(), ModelFlags::plain_classifier(), 7);
  EXPECT_FALSE(has_prefix(plain.params(), "sola"));
  EXPECT_FALSE(has_prefix(plain.params(), "classifier"));
  EXPECT_TRUE(has_prefix(plain.params(), "plain.fc"));
}

// Perturbation probes: parameters of a disabled path must not influence
// the output.
TEST(Model, DisabledPathsDoNotInfluenceOutput) {
  const Tensor<float> x = images<float>(2, 256, 8);
  {
    ModelFlags f;
    f.use_noise_branch = false;
    SolaModel<float> m(BackboneSpec::tiny(), f, 8);
    m.set_training(false);
    const auto before = m.forward(x).logits;
    for (auto& v : m.asrm().weight().value.vec()) v += 1.f;  // detached layer
    EXPECT_EQ(m.forward(x).logits.vec(), before.vec());
  }
  {
    SolaModel<float> m(BackboneSpec::tiny(), ModelFlags{}, 8);
    m.set_training(false);
    const auto before = m.forward(x).logits;
    for (auto& v : find(m, "lem2.theta.weight")->value.vec()) v *= -3.f;  // lambda is still 0
    EXPECT_EQ(m.forward(x).logits.vec(), before.vec());
    for (auto& v : find(m, "asrm.weight")->value.vec()) v *= 1.5f;
    EXPECT_NE(m.forward(x).logits.vec(), before.vec());
  }
}

TEST(Model, NoiseWiringFlagChangesComputation) {
  const Tensor<float> x = images<float>(1, 256, 9);
  SolaModel<float> a(BackboneSpec::tiny(), ModelFlags{}, 9);
  ModelFlags f;
  f.noise_consumes_fused = true;
  SolaModel<float> b(BackboneSpec::tiny(), f, 9);
  a.set_training(false);
  b.set_training(false);
  EXPECT_NE(a.forward(x).logits.vec(), b.forward(x).logits.vec());
}

// Dead-path detector: after one update (so LEM's lambda is non-zero), every
// trainable parameter receives a non-zero gradient for at least one of a few
// initialisations (a single init can legitimately kill a 2-unit SE bottleneck).
// LEM at the 16x16 stage has 1x1 patches, where theta and f cannot matter.
TEST(Model, EveryTrainableParameterReceivesGradient) {
  const Tensor<float> x = images<float>(2, 256, 10);
  ForgeryMask mask(256, 256);
  for (int y = 60; y < 150; ++y)
    for (int c = 40; c < 170; ++c) mask.at(y, c) = 1;
  const std::vector<AnomalyGroundTruth> gt{zero_ground_truth(16, 16), anomaly_ground_truth(mask, 16)};
  const std::vector<int> labels{0, 1};
  std::map<std::string, double> total;
  for (std::uint64_t seed : {10, 11, 12}) {
    SolaModel<float> m(BackboneSpec::tiny(), ModelFlags{}, seed);
    Adam<float> opt(m.params());
    for (int step = 0; step < 2; ++step) {
      const auto out = m.forward(x);
      auto loss = supervised_loss(out.maps, std::span<const AnomalyGroundTruth>(gt), out.logits, labels, {});
      m.zero_grad();
      m.backward({loss.dmaps, loss.dlogits});
      if (step == 0) {
        opt.step();
        m.project();
      }
    }
    for (const auto& p : m.params()) {
      if (p.buffer || !p.param->trainable) continue;
      for (float g : p.param->grad.vec()) total[p.name] += std::abs(g);
    }
  }
  const std::set<std::string> inert{"lem3.theta.weight", "lem3.theta.bias", "lem3.f.weight", "lem3.f.bias"};
  for (const auto& [name, s] : total) {
    if (inert.count(name)) EXPECT_EQ(s, 0.0) << name;
    else EXPECT_GT(s, 0.0) << name;
  }
}

TEST(Model, WholeModelGradientCheck) {
  BackboneSpec s = BackboneSpec::tiny();
  s.input_size = 128;
  s.grid = 8;
  ModelFlags f;
  f.lem_stages = {2};
  SolaModel<double> m(s, f, 11);
  find(m, "lem2.lambda")->value[0] = 0.5;
  Tensor<double> x = images<double>(2, 128, 11);
  const std::vector<int> labels{0, 1};
  auto loss_of = [&](ModelOutput<double>& out) { return weakly_supervised_loss(out.maps, out.logits, labels, {}); };
  m.zero_grad();
  auto out = m.forward(x);
  auto r = loss_of(out);
  m.backward({r.dmaps, r.dlogits});
  auto loss = [&] {
    auto o = m.forward(x);
    return loss_of(o).total;
  };
  // A large network has ReLU kinks within reach of a large step and tiny
  // gradients that a small step loses to roundoff. Both are artefacts of the
  // difference quotient, while a wrong analytic gradient disagrees at every
  // step, so each coordinate takes its best agreement over three steps.
  std::mt19937_64 rng(11);
  for (const char* name : {"asrm.weight", "rgb.stage1.conv1.conv.weight", "noise.stage2.bn.weight", "dcam3.fusion.weight",
                           "lem2.g.weight", "lem2.lambda", "sola.delta_h2.weight", "sola.phi_v1.weight",
                           "classifier.fc.weight"}) {
    Param<double>* p = find(m, name);
    ASSERT_NE(p, nullptr) << name;
    double worst = 0;
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = rng() % p->value.size();
      const double saved = p->value[i], a = p->grad[i];
      double best = 1;
      for (double h : {1e-5, 1e-6, 1e-7}) {
        p->value[i] = saved + h;
        const double up = loss();
        p->value[i] = saved - h;
        const double down = loss();
        p->value[i] = saved;
        const double n = (up - down) / (2 * h);
        best = std::min(best, std::abs(a - n) / std::max(std::abs(a) + std::abs(n), 1e-7));
      }
      worst = std::max(worst, best);
    }
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Checkpoint, RoundTripAndRejection) {
  const auto dir = test::scratch_dir("ckpt");
  const std::string path = (dir / "m.weights").string();
  SolaModel<float> a(BackboneSpec::tiny(), ModelFlags{}, 12);
  for (auto& v : a.params()[5].param->value.vec()) v += 0.25f;
  save_weights(path, a.params());
  SolaModel<float> b(BackboneSpec::tiny(), ModelFlags{}, 99);
  load_weights(path, b.params());
  a.set_training(false);
  b.set_training(false);
  const Tensor<float> x = images<float>(1, 256, 12);
  EXPECT_EQ(a.forward(x).logits.vec(), b.forward(x).logits.vec());

  ModelFlags f;
  f.use_lem = false;
  SolaModel<float> fewer(BackboneSpec::tiny(), f, 1);
  EXPECT_THROW(load_weights(path, fewer.params()), LoadError);  // unknown lem entries
  SolaModel<float> more(BackboneSpec::tiny(), ModelFlags{}, 1);
  save_weights(path, fewer.params());
  EXPECT_THROW(load_weights(path, more.params()), LoadError);  // missing lem entries
  BackboneSpec wide = BackboneSpec::tiny();
  wide.widths = {32, 64, 128, 192};
  SolaModel<float> other(wide, f, 1);
  EXPECT_THROW(load_weights(path, other.params()), LoadError);  // shape mismatch
}
