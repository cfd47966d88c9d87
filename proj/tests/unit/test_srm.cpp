#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "sola/srm.hpp"

using namespace sola;
using srm::Plane;

namespace {

// Independent oracle: explicit mirror padding into a larger buffer, then a
// textbook correlation.
Plane naive_residual(const Plane& img, const Plane& k) {
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  Plane padded(h + 4, w + 4);
  auto mirror = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  for (int y = -2; y < h + 2; ++y)
    for (int x = -2; x < w + 2; ++x) padded(y + 2, x + 2) = img(mirror(y, h), mirror(x, w));
  Plane out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(y, x) = (padded.block(y, x, 5, 5).array() * k.array()).sum();
  return out;
}

}  // namespace

TEST(Srm, BuiltinKernelsSatisfyImpulseFormExactly) {
  for (const auto& k : srm::builtin_srm_bank()) {
    EXPECT_TRUE(k.center_is_minus_one()) << k.name;
    EXPECT_TRUE(k.off_center_sums_to_one()) << k.name;
    EXPECT_EQ(k.quantized(srm::kCenter, srm::kCenter), -1.0) << k.name;
  }
}

TEST(Srm, BankHasKvKbAndSecondOrderWithTheirQuantizers) {
  const auto bank = srm::builtin_srm_bank();
  ASSERT_EQ(bank.size(), 3u);
  EXPECT_EQ(bank[0].q, 12);
  EXPECT_EQ(bank[1].q, 4);
  EXPECT_EQ(bank[2].q, 2);
  EXPECT_EQ(bank[0].weights[2][2], -12);
  EXPECT_EQ(bank[1].weights[2][2], -4);
  EXPECT_EQ(bank[2].weights[2][1], 1);
}

TEST(Srm, ResidualMatchesNaiveConvolution) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 255);
  for (int trial = 0; trial < 10; ++trial) {
    const int h = 5 + trial * 3, w = 5 + trial * 2;
    Plane img(h, w);
    for (int i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
    for (const auto& k : srm::builtin_srm_bank()) {
      const Plane got = srm::residual(img, k), want = naive_residual(img, k.quantized());
      EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-10) << k.name << " " << h << "x" << w;
    }
  }
}

TEST(Srm, ResidualOfConstantImageIsZero) {
  const Plane img = Plane::Constant(9, 11, 37.0);
  for (const auto& k : srm::builtin_srm_bank()) EXPECT_LE(srm::residual(img, k).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Srm, ResidualRejectsImagesSmallerThanKernel) {
  EXPECT_THROW(srm::residual(Plane::Zero(4, 8), srm::builtin_srm_bank()[0]), ShapeError);
}

TEST(Srm, QuantizeRoundTruncateExamples) {
  Plane r(1, 2);
  r << 5.6, -7.0;
  const auto a = srm::quantize_round_truncate(r.leftCols(1), 2);
  EXPECT_EQ(a(0, 0), 2);  // round(2.8) = 3, truncated to 2
  const auto b = srm::quantize_round_truncate(r.rightCols(1), 4);
  EXPECT_EQ(b(0, 0), -2);  // round(-1.75) = -2
}

TEST(Srm, QuantizeRoundsHalfAwayFromZeroAndTruncates) {
  Plane r(1, 5);
  r << 1.0, -1.0, 3.0, -100, 0.4;
  const auto q = srm::quantize_round_truncate(r, 2, 2);
  EXPECT_EQ(q(0, 0), 1);
  EXPECT_EQ(q(0, 1), -1);
  EXPECT_EQ(q(0, 2), 2);
  EXPECT_EQ(q(0, 3), -2);
  EXPECT_EQ(q(0, 4), 0);
}

TEST(Srm, QuantizeValidatesArguments) {
  EXPECT_THROW(srm::quantize_round_truncate(Plane::Zero(2, 2), 0), ParameterError);
  EXPECT_THROW(srm::quantize_round_truncate(Plane::Zero(2, 2), 1, 0), ParameterError);
}

TEST(Srm, WriteBankEmitsOneBlockPerKernel) {
  std::ostringstream os;
  srm::write_bank(os, srm::builtin_srm_bank());
  const std::string s = os.str();
  EXPECT_NE(s.find("# kv5x5 q=12"), std::string::npos);
  EXPECT_NE(s.find("# second_order_1d q=2"), std::string::npos);
}
