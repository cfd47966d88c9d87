#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "sola/supervision.hpp"
#include "test_util.hpp"

using namespace sola;

namespace {

// Independent enumerators: for every cell, look the neighbour up by explicit
// coordinates and compare.
struct BruteGroup {
  std::vector<std::vector<int>> label, valid;
};

BruteGroup brute_first(const std::vector<std::vector<double>>& s, int dy, int dx) {
  const int h = static_cast<int>(s.size()), w = static_cast<int>(s[0].size());
  BruteGroup out{std::vector<std::vector<int>>(h, std::vector<int>(w, 0)),
                 std::vector<std::vector<int>>(h, std::vector<int>(w, 0))};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int ni = i + dy, nj = j + dx;
      if (ni < 0 || nj < 0 || ni >= h || nj >= w) continue;
      out.valid[i][j] = 1;
      out.label[i][j] = std::abs(s[i][j] - s[ni][nj]) > 1e-6 ? 1 : 0;
    }
  return out;
}

BruteGroup brute_second(const std::vector<std::vector<int>>& a, int dy, int dx) {
  std::vector<std::vector<double>> s(a.size(), std::vector<double>(a[0].size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) s[i][j] = a[i][j];
  return brute_first(s, dy, dx);
}

void expect_grid_eq(const BinaryGrid& g, const std::vector<std::vector<int>>& want) {
  ASSERT_EQ(g.rows, static_cast<int>(want.size()));
  for (int i = 0; i < g.rows; ++i)
    for (int j = 0; j < g.cols; ++j) ASSERT_EQ(g.at(i, j), want[i][j]) << i << "," << j;
}

PatchScoreGrid grid_of(const std::vector<std::vector<double>>& s) {
  PatchScoreGrid g{static_cast<int>(s.size()), static_cast<int>(s[0].size()), 16, {}};
  for (const auto& row : s) g.scores.insert(g.scores.end(), row.begin(), row.end());
  return g;
}

AnomalyMaps<double> constant_maps(int n, int c, int h, int w, double v) {
  AnomalyMaps<double> m;
  for (int g = 0; g < 4; ++g) {
    m.first[g] = Tensor<double>(n, c, h, w);
    m.first[g].fill(v);
    m.second[g] = Tensor<double>(n, 1, h, w);
    m.second[g].fill(v);
  }
  return m;
}

}  // namespace

TEST(PatchScores, Examples) {
  ForgeryMask m(32, 32);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) m.at(y, x) = 1;
  const auto g = patch_scores(m, 16);
  ASSERT_EQ(g.rows, 2);
  EXPECT_EQ(g.scores, (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(patch_scores(ForgeryMask(32, 32), 16).scores, std::vector<double>(4, 0.0));
}

TEST(PatchScores, MatchesNaiveAveraging) {
  std::mt19937_64 rng(1);
  ForgeryMask m(256, 256);
  for (auto& p : m.pixels) p = rng() & 1u;
  const auto g = patch_scores(m, 16);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      double s = 0;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) s += m.at(16 * i + y, 16 * j + x);
      EXPECT_EQ(g.at(i, j), s / 256.0);
    }
}

TEST(PatchScores, Errors) {
  EXPECT_THROW(patch_scores(ForgeryMask(30, 32), 16), ShapeError);
  ForgeryMask m(32, 32);
  m.pixels[5] = 2;
  EXPECT_THROW(patch_scores(m, 16), ValidationError);
}

TEST(FirstOrderGt, TwoByTwoExample) {
  const auto gt = first_order_gt(grid_of({{1, 0}, {0, 0}}));
  const auto& v1 = gt.labels[static_cast<int>(Group::v1)];
  const auto& h1 = gt.labels[static_cast<int>(Group::h1)];
  EXPECT_EQ(v1.at(0, 1), 1);
  EXPECT_EQ(v1.at(1, 1), 0);
  EXPECT_EQ(h1.at(1, 0), 1);
  EXPECT_EQ(h1.at(1, 1), 0);
  EXPECT_EQ(gt.valid[static_cast<int>(Group::v1)].at(0, 0), 0);
  EXPECT_EQ(gt.valid[static_cast<int>(Group::h1)].at(0, 1), 0);
  // distance-2 groups have no valid position on a 2x2 grid
  for (auto v : gt.valid[static_cast<int>(Group::v2)].cells) EXPECT_EQ(v, 0);
  for (auto v : gt.labels[static_cast<int>(Group::h2)].cells) EXPECT_EQ(v, 0);
}

TEST(FirstOrderGt, ConstantGridsGiveZero) {
  for (double v : {0.0, 0.37, 1.0}) {
    const auto gt = anomaly_ground_truth(grid_of(std::vector<std::vector<double>>(5, std::vector<double>(6, v))));
    for (int g = 0; g < 4; ++g) {
      for (auto c : gt.first.labels[g].cells) EXPECT_EQ(c, 0);
      for (auto c : gt.second.labels[g].cells) EXPECT_EQ(c, 0);
    }
  }
}

TEST(SecondOrderGt, RowExample) {
  std::array<BinaryGrid, 4> first;
  for (auto& g : first) g = BinaryGrid(1, 4);
  const std::vector<std::uint8_t> row{0, 1, 0, 0};
  first[static_cast<int>(Group::v1)].cells = row;
  const auto s = second_order_gt(first);
  const auto& v1 = s.labels[static_cast<int>(Group::v1)];
  EXPECT_EQ(s.valid[static_cast<int>(Group::v1)].at(0, 0), 0);
  EXPECT_EQ(v1.at(0, 1), 1);
  EXPECT_EQ(v1.at(0, 2), 1);
  EXPECT_EQ(v1.at(0, 3), 0);
}

TEST(SecondOrderGt, RejectsNonBinaryInput) {
  std::array<BinaryGrid, 4> first;
  for (auto& g : first) g = BinaryGrid(3, 3);
  first[2].cells[4] = 3;
  EXPECT_THROW(second_order_gt(first), ValidationError);
}

TEST(GroundTruth, MatchesBruteForceOnRandomGrids) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> size(4, 16), level(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = size(rng), w = size(rng);
    std::vector<std::vector<double>> s(h, std::vector<double>(w));
    for (auto& row : s)
      for (double& v : row) v = level(rng) / 4.0;  // few levels so ties are common
    const auto gt = anomaly_ground_truth(grid_of(s));
    for (Group g : kGroups) {
      const int k = static_cast<int>(g);
      const auto [dy, dx] = neighbour_offset(g);
      const BruteGroup f = brute_first(s, dy, dx);
      expect_grid_eq(gt.first.labels[k], f.label);
      expect_grid_eq(gt.first.valid[k], f.valid);
      const BruteGroup sec = brute_second(f.label, dy, dx);
      expect_grid_eq(gt.second.labels[k], sec.label);
      expect_grid_eq(gt.second.valid[k], sec.valid);
    }
  }
}

TEST(GroundTruth, FullFrameAndEmptyMasksGiveZero) {
  for (std::uint8_t v : {0, 1}) {
    const auto gt = anomaly_ground_truth(ForgeryMask(64, 64, v), 16);
    for (int g = 0; g < 4; ++g) {
      for (auto c : gt.first.labels[g].cells) EXPECT_EQ(c, 0);
      for (auto c : gt.second.labels[g].cells) EXPECT_EQ(c, 0);
    }
  }
}

TEST(SupervisedLoss, HalfPredictionOnZeroGroundTruthIsFourLn2) {
  const auto pred = constant_maps(1, 3, 5, 5, 0.5);
  const std::vector<AnomalyGroundTruth> gt{zero_ground_truth(5, 5)};
  Tensor<double> logits(1, 1, 1, 1);
  const std::vector<int> labels{0};
  const auto r = supervised_loss(pred, std::span<const AnomalyGroundTruth>(gt), logits, labels, {0, 1, 0});
  EXPECT_NEAR(r.total, 4 * std::numbers::ln2, 1e-12);
}

TEST(SupervisedLoss, PerfectPredictionSitsAtClampFloor) {
  std::mt19937_64 rng(3);
  ForgeryMask m(64, 64);
  for (int y = 10; y < 40; ++y)
    for (int x = 20; x < 50; ++x) m.at(y, x) = 1;
  const std::vector<AnomalyGroundTruth> gt{anomaly_ground_truth(m, 16)};
  AnomalyMaps<double> pred = constant_maps(1, 2, 4, 4, 0);
  for (int g = 0; g < 4; ++g) {
    for (int c = 0; c < 2; ++c)
      for (int k = 0; k < 16; ++k) pred.first[g].plane(0, c)[k] = gt[0].first.labels[g].cells[k];
    for (int k = 0; k < 16; ++k) pred.second[g].plane(0, 0)[k] = gt[0].second.labels[g].cells[k];
  }
  Tensor<double> logits(1, 1, 1, 1);
  logits[0] = 40;
  const std::vector<int> labels{1};
  const auto r = supervised_loss(pred, std::span<const AnomalyGroundTruth>(gt), logits, labels, {1, 1, 1});
  EXPECT_LE(r.total, 10 * 2e-7);
}

TEST(SupervisedLoss, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(4);
  const int n = 2, c = 3, h = 4, w = 5;
  std::vector<AnomalyGroundTruth> gt;
  for (int b = 0; b < n; ++b) {
    std::vector<std::vector<double>> s(h, std::vector<double>(w));
    for (auto& row : s)
      for (double& v : row) v = (rng() % 3) / 2.0;
    gt.push_back(anomaly_ground_truth(grid_of(s)));
  }
  AnomalyMaps<double> pred;
  for (int g = 0; g < 4; ++g) {
    pred.first[g] = random_tensor<double>({n, c, h, w}, rng, 0.01, 0.99);
    pred.second[g] = random_tensor<double>({n, 1, h, w}, rng, 0.01, 0.99);
  }
  const Tensor<double> logits = random_tensor<double>({n, 1, 1, 1}, rng, -2, 2);
  const std::vector<int> labels{0, 1};
  const LossWeights lw{0.7, 1.3, 0.4};
  const auto r = supervised_loss(pred, std::span<const AnomalyGroundTruth>(gt), logits, labels, lw);

  double cls = 0, first = 0, second = 0;
  for (int b = 0; b < n; ++b) {
    const double p = 1 / (1 + std::exp(-logits[b]));
    cls += -(labels[b] * std::log(p) + (1 - labels[b]) * std::log(1 - p)) / n;
    for (int g = 0; g < 4; ++g) {
      for (int order = 0; order < 2; ++order) {
        const Tensor<double>& t = order ? pred.second[g] : pred.first[g];
        const GroupGrids& gg = order ? gt[b].second : gt[b].first;
        double sum = 0, count = 0;
        for (int ch = 0; ch < t.c(); ++ch)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
              if (!gg.valid[g].at(i, j)) continue;
              const double y = gg.labels[g].at(i, j), q = t(b, ch, i, j);
              sum += -(y * std::log(q) + (1 - y) * std::log(1 - q));
              count += 1;
            }
        (order ? second : first) += count ? sum / count / n : 0;
      }
    }
  }
  EXPECT_NEAR(r.cls, cls, 1e-8);
  EXPECT_NEAR(r.first, first, 1e-8);
  EXPECT_NEAR(r.second, second, 1e-8);
  EXPECT_NEAR(r.total, lw.alpha * cls + lw.beta * first + lw.gamma * second, 1e-8);
}

TEST(SupervisedLoss, GradientCheck) {
  std::mt19937_64 rng(5);
  const int n = 2, c = 3, h = 5, w = 5;
  std::vector<AnomalyGroundTruth> gt;
  for (int b = 0; b < n; ++b) {
    std::vector<std::vector<double>> s(h, std::vector<double>(w));
    for (auto& row : s)
      for (double& v : row) v = (rng() % 2);
    gt.push_back(anomaly_ground_truth(grid_of(s)));
  }
  AnomalyMaps<double> pred;
  for (int g = 0; g < 4; ++g) {
    pred.first[g] = random_tensor<double>({n, c, h, w}, rng, 0.05, 0.95);
    pred.second[g] = random_tensor<double>({n, 1, h, w}, rng, 0.05, 0.95);
  }
  Tensor<double> logits = random_tensor<double>({n, 1, 1, 1}, rng, -2, 2);
  const std::vector<int> labels{1, 0};
  const LossWeights lw{0.5, 1.0, 2.0};
  auto loss = [&] {
    return supervised_loss(pred, std::span<const AnomalyGroundTruth>(gt), logits, labels, lw).total;
  };
  const auto r = supervised_loss(pred, std::span<const AnomalyGroundTruth>(gt), logits, labels, lw);
  for (int g = 0; g < 4; ++g) {
    EXPECT_LT(test::gradient_error(pred.first[g], r.dmaps.first[g], loss, rng), 1e-4);
    EXPECT_LT(test::gradient_error(pred.second[g], r.dmaps.second[g], loss, rng), 1e-4);
  }
  EXPECT_LT(test::gradient_error(logits, r.dlogits, loss, rng), 1e-4);
}

TEST(SingleSideLoss, Examples) {
  const std::vector<int> real{0}, fake{1};
  const LossWeights lw{1, 1, 0};
  auto m = constant_maps(1, 4, 6, 6, 0.0);
  m.first[static_cast<int>(Group::v1)].fill(0.25);
  EXPECT_NEAR(single_side_loss(m, real, lw).total, 0.25, 1e-15);
  EXPECT_EQ(single_side_loss(m, fake, lw).total, 0.0);
  EXPECT_EQ(single_side_loss(constant_maps(1, 4, 6, 6, 0.0), real, lw).total, 0.0);
}

TEST(SingleSideLoss, NonNegativeAndIgnoresFakes) {
  std::mt19937_64 rng(6);
  AnomalyMaps<double> m;
  for (int g = 0; g < 4; ++g) {
    m.first[g] = random_tensor<double>({3, 2, 4, 4}, rng, 0, 1);
    m.second[g] = random_tensor<double>({3, 1, 4, 4}, rng, 0, 1);
  }
  const std::vector<int> labels{1, 0, 1};
  const auto r = single_side_loss(m, labels, {});
  EXPECT_GT(r.total, 0.0);
  for (int g = 0; g < 4; ++g) {
    for (int b : {0, 2}) {
      for (int ch = 0; ch < 2; ++ch)
        for (int k = 0; k < 16; ++k) EXPECT_EQ(r.dmaps.first[g].plane(b, ch)[k], 0.0);
    }
  }
}

TEST(SingleSideLoss, GradientCheck) {
  std::mt19937_64 rng(7);
  AnomalyMaps<double> m;
  for (int g = 0; g < 4; ++g) {
    m.first[g] = random_tensor<double>({2, 3, 5, 5}, rng, 0.05, 0.95);
    m.second[g] = random_tensor<double>({2, 1, 5, 5}, rng, 0.05, 0.95);
  }
  Tensor<double> logits = random_tensor<double>({2, 1, 1, 1}, rng, -1, 1);
  const std::vector<int> labels{0, 1};
  const LossWeights lw{0.3, 1.5, 0.5};
  auto loss = [&] { return weakly_supervised_loss(m, logits, labels, lw).total; };
  const auto r = weakly_supervised_loss(m, logits, labels, lw);
  for (int g = 0; g < 4; ++g) {
    EXPECT_LT(test::gradient_error(m.first[g], r.dmaps.first[g], loss, rng), 1e-4);
    EXPECT_LT(test::gradient_error(m.second[g], r.dmaps.second[g], loss, rng), 1e-4);
  }
  EXPECT_LT(test::gradient_error(logits, r.dlogits, loss, rng), 1e-4);
}

TEST(ClassificationLoss, MatchesClosedForm) {
  Tensor<double> z(2, 1, 1, 1);
  z[0] = 0;
  z[1] = 2;
  const std::vector<int> y{1, 0};
  const double want = (std::log(2.0) + std::log1p(std::exp(2.0))) / 2;
  EXPECT_NEAR(classification_loss<double>(z, y, nullptr), want, 1e-12);
}
