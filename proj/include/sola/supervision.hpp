#pragma once

// Ground-truth anomaly grids derived from forgery masks, and the losses that
// train the anomaly head (mask-supervised BCE, single-side L1) plus the image
// level classification BCE.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sola/anomaly.hpp"

namespace sola {

/// Binary image marking forged pixels (values 0/1), row-major.
struct ForgeryMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  ForgeryMask() = default;
  ForgeryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double area_fraction() const {
    std::size_t s = 0;
    for (auto p : pixels) s += p;
    return pixels.empty() ? 0.0 : double(s) / double(pixels.size());
  }
};

struct PatchScoreGrid {
  int rows = 0, cols = 0, patch_pixels = 16;
  std::vector<double> scores;
  double at(int r, int c) const { return scores[static_cast<std::size_t>(r) * cols + c]; }
};

struct BinaryGrid {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> cells;

  BinaryGrid() = default;
  BinaryGrid(int r, int c) : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c, 0) {}
  std::uint8_t& at(int r, int c) { return cells[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c]; }
  bool operator==(const BinaryGrid&) const = default;
};

/// Labels and validity per neighbour group (order v1, v2, h1, h2).
struct GroupGrids {
  std::array<BinaryGrid, 4> labels;
  std::array<BinaryGrid, 4> valid;
};

struct AnomalyGroundTruth {
  GroupGrids first;
  GroupGrids second;
};

struct LossWeights {
  double alpha = 1.0, beta = 1.0, gamma = 1.0;
};

/// Position (i, j) of group g has its neighbour on the grid.
inline bool has_neighbour(Group g, int i, int j) {
  const auto [dy, dx] = neighbour_offset(g);
  return i + dy >= 0 && j + dx >= 0;
}

inline PatchScoreGrid patch_scores(const ForgeryMask& mask, int patch_pixels = 16) {
  if (patch_pixels <= 0 || mask.height % patch_pixels != 0 || mask.width % patch_pixels != 0)
    throw ShapeError("patch_scores: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                     " not divisible by patch size " + std::to_string(patch_pixels));
  PatchScoreGrid g{mask.height / patch_pixels, mask.width / patch_pixels, patch_pixels, {}};
  g.scores.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0);
  std::vector<std::uint32_t> counts(g.scores.size(), 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const auto v = mask.at(y, x);
      if (v > 1) throw ValidationError("patch_scores: mask value " + std::to_string(v) + " at (" +
                                       std::to_string(y) + "," + std::to_string(x) + ") is not binary");
      counts[static_cast<std::size_t>(y / patch_pixels) * g.cols + x / patch_pixels] += v;
    }
  const double area = double(patch_pixels) * patch_pixels;
  for (std::size_t k = 0; k < counts.size(); ++k) g.scores[k] = counts[k] / area;
  return g;
}

/// a(i,j) = 1 iff |score(i,j) - score(neighbour)| > eps. Off-grid neighbours
/// give valid = 0 and a = 0.
inline GroupGrids first_order_gt(const PatchScoreGrid& grid, double eps = 1e-6) {
  GroupGrids out;
  for (Group g : kGroups) {
    const int k = static_cast<int>(g);
    const auto [dy, dx] = neighbour_offset(g);
    out.labels[k] = BinaryGrid(grid.rows, grid.cols);
    out.valid[k] = BinaryGrid(grid.rows, grid.cols);
    for (int i = 0; i < grid.rows; ++i)
      for (int j = 0; j < grid.cols; ++j) {
        if (!has_neighbour(g, i, j)) continue;
        out.valid[k].at(i, j) = 1;
        out.labels[k].at(i, j) = std::abs(grid.at(i, j) - grid.at(i + dy, j + dx)) > eps;
      }
  }
  return out;
}

/// a'(i,j) = 1 iff a(i,j) != a(neighbour), using each group's own geometry.
inline GroupGrids second_order_gt(const std::array<BinaryGrid, 4>& first) {
  GroupGrids out;
  for (Group g : kGroups) {
    const int k = static_cast<int>(g);
    const BinaryGrid& a = first[k];
    for (auto v : a.cells)
      if (v > 1) throw ValidationError("second_order_gt: non-binary first order grid (group " +
                                       std::string(kGroupNames[k]) + ")");
    const auto [dy, dx] = neighbour_offset(g);
    out.labels[k] = BinaryGrid(a.rows, a.cols);
    out.valid[k] = BinaryGrid(a.rows, a.cols);
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) {
        if (!has_neighbour(g, i, j)) continue;
        out.valid[k].at(i, j) = 1;
        out.labels[k].at(i, j) = a.at(i, j) != a.at(i + dy, j + dx);
      }
  }
  return out;
}

inline AnomalyGroundTruth anomaly_ground_truth(const PatchScoreGrid& grid, double eps = 1e-6) {
  AnomalyGroundTruth gt;
  gt.first = first_order_gt(grid, eps);
  gt.second = second_order_gt(gt.first.labels);
  return gt;
}

inline AnomalyGroundTruth anomaly_ground_truth(const ForgeryMask& mask, int patch_pixels) {
  return anomaly_ground_truth(patch_scores(mask, patch_pixels));
}

/// Ground truth for an image without forged pixels on an rows x cols grid.
inline AnomalyGroundTruth zero_ground_truth(int rows, int cols) {
  PatchScoreGrid g{rows, cols, 1, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0)};
  return anomaly_ground_truth(g);
}

template <typename T>
struct LossResult {
  double total = 0, cls = 0, first = 0, second = 0;
  AnomalyMaps<T> dmaps;  // gradient w.r.t. the predicted maps
  Tensor<T> dlogits;     // gradient w.r.t. the logits (N x 1 x 1 x 1)
};

namespace detail {

inline constexpr double kBceEps = 1e-7;

// BCE at a clamped probability; the derivative is taken at the clamped value
// so saturated predictions still receive a signal.
inline double bce(double p, double y, double* dp) {
  const double q = std::clamp(p, kBceEps, 1.0 - kBceEps);
  if (dp) *dp = (q - y) / (q * (1.0 - q));
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

// Numerically stable BCE on a logit; returns loss, writes d/dlogit.
inline double bce_with_logit(double z, double y, double* dz) {
  const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  if (dz) *dz = p - y;
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
void check_maps(const AnomalyMaps<T>& pred) {
  const Shape s = pred.first[0].shape();
  for (int g = 0; g < 4; ++g) {
    const Shape a = pred.first[g].shape(), b = pred.second[g].shape();
    if (a.n != s.n || a.h != s.h || a.w != s.w || !(a == s) || b.n != s.n || b.c != 1 || b.h != s.h || b.w != s.w)
      throw ShapeError("loss: anomaly map shapes disagree: " + a.str() + " / " + b.str());
  }
}

template <typename T>
AnomalyMaps<T> zero_like(const AnomalyMaps<T>& m) {
  AnomalyMaps<T> z;
  for (int g = 0; g < 4; ++g) {
    z.first[g] = Tensor<T>(m.first[g].shape());
    z.second[g] = Tensor<T>(m.second[g].shape());
  }
  return z;
}

}  // namespace detail

/// Mean BCE of sigmoid(logit) against the image labels.
template <typename T>
double classification_loss(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* dlogits) {
  const int n = logits.n();
  if (static_cast<int>(labels.size()) != n || logits.c() != 1)
    throw ShapeError("classification_loss: " + std::to_string(labels.size()) + " labels for logits " +
                     logits.shape().str());
  if (dlogits) *dlogits = Tensor<T>(logits.shape());
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    double dz;
    loss += detail::bce_with_logit(logits[i], labels[i], &dz);
    if (dlogits) (*dlogits)[i] = static_cast<T>(dz / n);
  }
  return loss / n;
}

/// alpha * BCE_cls + beta * sum_g BCE(M_g, GT_g) + gamma * sum_g BCE(M'_g, GT'_g).
/// First order GT is broadcast over the map channels; every anomaly term is a
/// mean over valid positions; the total is a mean over the batch.
template <typename T>
LossResult<T> supervised_loss(const AnomalyMaps<T>& pred, std::span<const AnomalyGroundTruth> gt,
                              const Tensor<T>& logits, std::span<const int> labels, const LossWeights& w) {
  detail::check_maps(pred);
  const int n = pred.first[0].n(), h = pred.first[0].h(), wd = pred.first[0].w();
  if (static_cast<int>(gt.size()) != n) throw ShapeError("supervised_loss: ground truth count != batch size");
  for (const auto& g : gt)
    if (g.first.labels[0].rows != h || g.first.labels[0].cols != wd)
      throw ShapeError("supervised_loss: ground truth grid " + std::to_string(g.first.labels[0].rows) + "x" +
                       std::to_string(g.first.labels[0].cols) + " vs maps " + pred.first[0].shape().str());
  LossResult<T> r;
  r.dmaps = detail::zero_like(pred);
  r.cls = classification_loss(logits, labels, &r.dlogits);
  for (auto& v : r.dlogits.vec()) v = static_cast<T>(v * w.alpha);

  auto term = [&](const Tensor<T>& p, Tensor<T>& dp, const BinaryGrid& y, const BinaryGrid& valid, int b,
                  double weight) {
    std::size_t count = 0;
    for (auto v : valid.cells) count += v;
    if (count == 0) return 0.0;
    const double denom = double(count) * p.c() * n;
    double sum = 0;
    for (int c = 0; c < p.c(); ++c) {
      const T* pp = p.plane(b, c);
      T* dd = dp.plane(b, c);
      for (int k = 0; k < h * wd; ++k) {
        if (!valid.cells[k]) continue;
        double d;
        sum += detail::bce(pp[k], y.cells[k], &d);
        dd[k] = static_cast<T>(weight * d / denom);
      }
    }
    return sum / (double(count) * p.c());
  };

  for (int b = 0; b < n; ++b)
    for (int g = 0; g < 4; ++g) {
      r.first += term(pred.first[g], r.dmaps.first[g], gt[b].first.labels[g], gt[b].first.valid[g], b, w.beta);
      r.second +=
          term(pred.second[g], r.dmaps.second[g], gt[b].second.labels[g], gt[b].second.valid[g], b, w.gamma);
    }
  r.first /= n;
  r.second /= n;
  r.total = w.alpha * r.cls + w.beta * r.first + w.gamma * r.second;
  return r;
}

/// Mean-L1 penalty on the anomaly maps of real images only (fake images
/// contribute zero). Averaged over valid positions and over the batch; the
/// classification term is not included (see weakly_supervised_loss).
template <typename T>
LossResult<T> single_side_loss(const AnomalyMaps<T>& pred, std::span<const int> labels, const LossWeights& w) {
  detail::check_maps(pred);
  const int n = pred.first[0].n(), h = pred.first[0].h(), wd = pred.first[0].w();
  if (static_cast<int>(labels.size()) != n) throw ShapeError("single_side_loss: label count != batch size");
  LossResult<T> r;
  r.dmaps = detail::zero_like(pred);

  auto term = [&](const Tensor<T>& p, Tensor<T>& dp, Group g, int b, double weight) {
    std::size_t count = 0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) count += has_neighbour(g, i, j);
    if (count == 0) return 0.0;
    const double denom = double(count) * p.c() * n;
    double sum = 0;
    for (int c = 0; c < p.c(); ++c) {
      const T* pp = p.plane(b, c);
      T* dd = dp.plane(b, c);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j) {
          if (!has_neighbour(g, i, j)) continue;
          const T v = pp[i * wd + j];
          sum += std::abs(double(v));
          dd[i * wd + j] = static_cast<T>(weight * (v > T(0) ? 1.0 : (v < T(0) ? -1.0 : 0.0)) / denom);
        }
    }
    return sum / (double(count) * p.c());
  };

  for (int b = 0; b < n; ++b) {
    if (labels[b] != 0) continue;
    for (Group g : kGroups) {
      const int k = static_cast<int>(g);
      r.first += term(pred.first[k], r.dmaps.first[k], g, b, w.beta);
      r.second += term(pred.second[k], r.dmaps.second[k], g, b, w.gamma);
    }
  }
  r.first /= n;
  r.second /= n;
  r.total = w.beta * r.first + w.gamma * r.second;
  r.dlogits = Tensor<T>(n, 1, 1, 1);
  return r;
}

/// alpha * BCE_cls + single_side_loss.
template <typename T>
LossResult<T> weakly_supervised_loss(const AnomalyMaps<T>& pred, const Tensor<T>& logits,
                                     std::span<const int> labels, const LossWeights& w) {
  LossResult<T> r = single_side_loss(pred, labels, w);
  r.cls = classification_loss(logits, labels, &r.dlogits);
  for (auto& v : r.dlogits.vec()) v = static_cast<T>(v * w.alpha);
  r.total += w.alpha * r.cls;
  return r;
}

}  // namespace sola
