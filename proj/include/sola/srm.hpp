#pragma once

// Reference (fixed) Spatial Rich Model residual pipeline.

#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sola/error.hpp"
#include "sola/layers.hpp"

namespace sola::srm {

inline constexpr int kKernelSize = 5;
inline constexpr int kCenter = 2;

using Plane = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// An SRM high-pass kernel kept in integer form together with its quantizer,
/// so the centre / off-centre invariants can be checked exactly.
struct SrmKernel {
  std::string name;
  std::array<std::array<int, kKernelSize>, kKernelSize> weights{};
  int q = 1;

  double quantized(int r, int c) const { return static_cast<double>(weights[r][c]) / q; }

  Plane quantized() const {
    Plane k(kKernelSize, kKernelSize);
    for (int r = 0; r < kKernelSize; ++r)
      for (int c = 0; c < kKernelSize; ++c) k(r, c) = quantized(r, c);
    return k;
  }

  int off_center_sum() const {
    int s = 0;
    for (int r = 0; r < kKernelSize; ++r)
      for (int c = 0; c < kKernelSize; ++c)
        if (r != kCenter || c != kCenter) s += weights[r][c];
    return s;
  }

  // Exact checks in integer arithmetic: w/q == -1 <=> w == -q.
  bool center_is_minus_one() const { return weights[kCenter][kCenter] == -q; }
  bool off_center_sums_to_one() const { return off_center_sum() == q; }
};

using FilterBank = std::vector<SrmKernel>;

/// The three SRM kernels used by the noise branch: the 5x5 "KV" kernel (q=12),
/// the 3x3 "KB" kernel (q=4) and the second-order 1-D kernel (q=2). Smaller
/// kernels are zero-padded to 5x5, centre aligned.
inline FilterBank builtin_srm_bank() {
  SrmKernel kv{"kv5x5",
               {{{-1, 2, -2, 2, -1},
                 {2, -6, 8, -6, 2},
                 {-2, 8, -12, 8, -2},
                 {2, -6, 8, -6, 2},
                 {-1, 2, -2, 2, -1}}},
               12};
  SrmKernel kb{"kb3x3",
               {{{0, 0, 0, 0, 0},
                 {0, -1, 2, -1, 0},
                 {0, 2, -4, 2, 0},
                 {0, -1, 2, -1, 0},
                 {0, 0, 0, 0, 0}}},
               4};
  SrmKernel second{"second_order_1d",
                   {{{0, 0, 0, 0, 0},
                     {0, 0, 0, 0, 0},
                     {0, 1, -2, 1, 0},
                     {0, 0, 0, 0, 0},
                     {0, 0, 0, 0, 0}}},
                   2};
  return {kv, kb, second};
}

/// Correlates `image` with the quantized kernel, reflection-padded so the
/// output has the input's size.
inline Plane residual(const Plane& image, const SrmKernel& kernel) {
  if (image.rows() < kKernelSize || image.cols() < kKernelSize)
    throw ShapeError("srm::residual: image " + std::to_string(image.rows()) + "x" +
                     std::to_string(image.cols()) + " smaller than 5x5 kernel");
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  const Plane k = kernel.quantized();
  Plane out = Plane::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int a = 0; a < kKernelSize; ++a) {
        const int iy = detail::source_index(y + a - kCenter, h, Padding::reflect);
        for (int b = 0; b < kKernelSize; ++b) {
          if (k(a, b) == 0.0) continue;
          const int ix = detail::source_index(x + b - kCenter, w, Padding::reflect);
          s += k(a, b) * image(iy, ix);
        }
      }
      out(y, x) = s;
    }
  return out;
}

struct ResidualImage {
  int rows = 0, cols = 0;
  int threshold = 2;
  std::vector<int> values;  // row-major

  int operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// trun(round(r / q)) with round-half-away-from-zero and truncation to [-T, T].
inline ResidualImage quantize_round_truncate(const Plane& residual, double q, int threshold = 2) {
  if (!(q > 0)) throw ParameterError("quantize_round_truncate: q must be > 0");
  if (threshold < 1) throw ParameterError("quantize_round_truncate: T must be >= 1");
  ResidualImage out{static_cast<int>(residual.rows()), static_cast<int>(residual.cols()), threshold, {}};
  out.values.reserve(static_cast<std::size_t>(residual.size()));
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) {
      const double v = std::round(residual(r, c) / q);
      out.values.push_back(static_cast<int>(std::clamp(v, -double(threshold), double(threshold))));
    }
  return out;
}

/// Plain-text dump: one block per kernel, a header line then 5 rows of decimals.
inline void write_bank(std::ostream& os, const FilterBank& bank) {
  for (const auto& k : bank) {
    os << "# " << k.name << " q=" << k.q << "\n";
    for (int r = 0; r < kKernelSize; ++r) {
      for (int c = 0; c < kKernelSize; ++c) os << (c ? " " : "") << k.quantized(r, c);
      os << "\n";
    }
    os << "\n";
  }
}

}  // namespace sola::srm
