#include <gtest/gtest.h>

#include <random>
#include <set>

#include "sola/anomaly.hpp"
#include "test_util.hpp"

using namespace sola;

namespace {

using Cell = std::pair<int, int>;

std::set<Cell> changed_cells(const Tensor<double>& a, const Tensor<double>& b) {
  std::set<Cell> out;
  for (int c = 0; c < a.c(); ++c)
    for (int i = 0; i < a.h(); ++i)
      for (int j = 0; j < a.w(); ++j)
        if (a(0, c, i, j) != b(0, c, i, j)) out.insert({i, j});
  return out;
}

}  // namespace

TEST(AnomalyBank, OutputShapes) {
  std::mt19937_64 rng(1);
  AnomalyPredictorBank<double> bank(256, rng);
  const auto m = bank.forward(random_tensor<double>({2, 256, 16, 16}, rng));
  for (int g = 0; g < 4; ++g) {
    EXPECT_EQ(m.first[g].shape(), (Shape{2, 64, 16, 16}));
    EXPECT_EQ(m.second[g].shape(), (Shape{2, 1, 16, 16}));
    for (double v : m.second[g].vec()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(AnomalyBank, ShapeErrors) {
  std::mt19937_64 rng(2);
  AnomalyPredictorBank<double> bank(8, rng, 4);
  EXPECT_THROW(bank.forward(Tensor<double>(1, 7, 8, 8)), ShapeError);
  EXPECT_THROW(bank.forward(Tensor<double>(1, 8, 2, 8)), ShapeError);
  std::array<Tensor<double>, 4> bad{Tensor<double>(1, 4, 5, 5), Tensor<double>(1, 4, 5, 5), Tensor<double>(1, 3, 5, 5),
                                    Tensor<double>(1, 4, 5, 5)};
  EXPECT_THROW(bank.predict_second_order(bad), ShapeError);
}

TEST(AnomalyBank, GroupGeometry) {
  EXPECT_EQ(neighbour_offset(Group::v1), (std::pair{0, -1}));
  EXPECT_EQ(neighbour_offset(Group::v2), (std::pair{0, -2}));
  EXPECT_EQ(neighbour_offset(Group::h1), (std::pair{-1, 0}));
  EXPECT_EQ(neighbour_offset(Group::h2), (std::pair{-2, 0}));
  const ConvSpec v2 = paired_conv_spec(Group::v2, 8, 4);
  EXPECT_EQ(v2.kh, 1);
  EXPECT_EQ(v2.kw, 2);
  EXPECT_EQ(v2.dil_w, 2);
  const ConvSpec h1 = paired_conv_spec(Group::h1, 8, 4);
  EXPECT_EQ(h1.kh, 2);
  EXPECT_EQ(h1.kw, 1);
  EXPECT_EQ(h1.dil_h, 1);
}

// Perturbing one feature vector must change exactly the cells whose
// receptive field contains it: the cell itself and the cell that has it as
// its neighbour (first order), widened once more for second order.
TEST(AnomalyBank, LocalityProbes) {
  std::mt19937_64 rng(3);
  AnomalyPredictorBank<double> bank(8, rng, 4);
  const Tensor<double> f = random_tensor<double>({1, 8, 9, 9}, rng);
  const auto base = bank.forward(f);
  const int i0 = 3, j0 = 4;
  Tensor<double> g = f;
  for (int c = 0; c < 8; ++c) g(0, c, i0, j0) += 0.5;
  const auto moved = bank.forward(g);
  for (Group grp : kGroups) {
    const int k = static_cast<int>(grp);
    const auto [dy, dx] = neighbour_offset(grp);
    const std::set<Cell> first{{i0, j0}, {i0 - dy, j0 - dx}};
    const std::set<Cell> second{{i0, j0}, {i0 - dy, j0 - dx}, {i0 - 2 * dy, j0 - 2 * dx}};
    EXPECT_EQ(changed_cells(base.first[k], moved.first[k]), first) << kGroupNames[k];
    EXPECT_EQ(changed_cells(base.second[k], moved.second[k]), second) << kGroupNames[k];
  }
}

TEST(AnomalyBank, NeighbourTapReadsZeroPaddingAtBorder) {
  std::mt19937_64 rng(4);
  AnomalyPredictorBank<double> bank(8, rng, 4);
  const Tensor<double> f = random_tensor<double>({1, 8, 6, 6}, rng);
  const auto base = bank.forward(f);
  // Column 0 of v1 only sees (i, 0) itself: perturbing column 5 cannot reach it.
  Tensor<double> g = f;
  for (int c = 0; c < 8; ++c) g(0, c, 2, 5) -= 1.0;
  const auto moved = bank.forward(g);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(base.first[0](0, c, 2, 0), moved.first[0](0, c, 2, 0));
}

TEST(AnomalyBank, GradientCheck) {
  std::mt19937_64 rng(5);
  AnomalyPredictorBank<double> bank(8, rng, 4);
  Tensor<double> f = random_tensor<double>({2, 8, 6, 6}, rng);
  AnomalyMaps<double> r;
  for (int g = 0; g < 4; ++g) {
    r.first[g] = random_tensor<double>({2, 4, 6, 6}, rng);
    r.second[g] = random_tensor<double>({2, 1, 6, 6}, rng);
  }
  auto loss = [&] {
    AnomalyPredictorBank<double> b = bank;
    const auto m = b.forward(f);
    double s = 0;
    for (int g = 0; g < 4; ++g) s += test::dot(r.first[g], m.first[g]) + test::dot(r.second[g], m.second[g]);
    return s;
  };
  ParamList<double> params;
  bank.collect(params, "sola");
  for (auto& p : params) p.param->zero_grad();
  bank.forward(f);
  const Tensor<double> df = bank.backward(r);
  EXPECT_LT(test::gradient_error(f, df, loss, rng), 1e-4);
  for (auto& p : params)
    EXPECT_LT(test::gradient_error(p.param->value, p.param->grad, loss, rng, 20), 1e-4) << p.name;
}

TEST(ClassifierHead, ShapesAndGradientCheck) {
  std::mt19937_64 rng(6);
  ClassifierHead<double> head(rng);
  std::array<Tensor<double>, 4> maps;
  for (auto& m : maps) m = random_tensor<double>({3, 1, 6, 6}, rng, 0.0, 1.0);
  const Tensor<double> r = random_tensor<double>({3, 1, 1, 1}, rng);
  ParamList<double> params;
  head.collect(params, "classifier");
  for (auto& p : params) p.param->zero_grad();
  EXPECT_EQ(head.forward(maps).shape(), (Shape{3, 1, 1, 1}));
  const auto dmaps = head.backward(r);
  auto loss = [&] {
    ClassifierHead<double> h = head;
    return test::dot(r, h.forward(maps));
  };
  for (int g = 0; g < 4; ++g) EXPECT_LT(test::gradient_error(maps[g], dmaps[g], loss, rng), 1e-4);
  for (auto& p : params)
    EXPECT_LT(test::gradient_error(p.param->value, p.param->grad, loss, rng, 20), 1e-4) << p.name;
}

TEST(ClassifierHead, RejectsMismatchedMaps) {
  std::mt19937_64 rng(7);
  ClassifierHead<double> head(rng);
  std::array<Tensor<double>, 4> maps{Tensor<double>(1, 1, 6, 6), Tensor<double>(1, 1, 6, 6),
                                     Tensor<double>(1, 1, 5, 6), Tensor<double>(1, 1, 6, 6)};
  EXPECT_THROW(head.forward(maps), ShapeError);
}
