#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sola/image_io.hpp"
#include "sola/tensor.hpp"

namespace sola {

struct HeatMap {
  int height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Bilinear resize (half-pixel centres) of a single plane.
inline std::vector<double> resize_plane(const std::vector<double>& in, int h, int w, int oh, int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * h / oh - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * w / ow - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      out[static_cast<std::size_t>(y) * ow + x] =
          (1 - ay) * ((1 - ax) * in[y0 * w + x0] + ax * in[y0 * w + x1]) +
          ay * ((1 - ax) * in[y1 * w + x0] + ax * in[y1 * w + x1]);
    }
  }
  return out;
}

/// Min-max normalisation to [0, 1]; a constant map becomes all zeros.
inline void normalize_unit(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  for (double& x : v) x = range > 0 ? (x - a) / range : 0.0;
}

/// ReLU(sum_c mean(dScore/dA_c) * A_c) for sample 0, upsampled to
/// out_h x out_w and normalised.
template <typename T>
HeatMap grad_cam(const Tensor<T>& activation, const Tensor<T>& grad, int out_h, int out_w) {
  activation.check_same(grad, "grad_cam");
  const int c = activation.c(), h = activation.h(), w = activation.w();
  std::vector<double> cam(static_cast<std::size_t>(h) * w, 0.0);
  for (int k = 0; k < c; ++k) {
    double weight = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) weight += grad(0, k, y, x);
    weight /= h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) cam[y * w + x] += weight * activation(0, k, y, x);
  }
  for (double& v : cam) v = std::max(v, 0.0);
  HeatMap out{out_h, out_w, resize_plane(cam, h, w, out_h, out_w)};
  normalize_unit(out.values);
  return out;
}

/// Blue-to-red colour ramp blended half and half over the image.
inline ImageU8 overlay(const ImageU8& image, const HeatMap& heat, double opacity = 0.5) {
  if (image.height != heat.height || image.width != heat.width)
    throw ShapeError("overlay: heat map and image differ in size");
  ImageU8 out(image.height, image.width, 3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double v = heat.at(y, x);
      const double rgb[3] = {std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0),
                             std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0),
                             std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0)};
      for (int c = 0; c < 3; ++c) {
        const double base = image.at(y, x, image.channels == 3 ? c : 0);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround((1 - opacity) * base + opacity * 255.0 * rgb[c]));
      }
    }
  return out;
}

}  // namespace sola
