#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sola/tensor.hpp"

namespace sola::test {

/// Central-difference check of d(loss)/d(t) against `analytic` on up to
/// `samples` randomly chosen coordinates. Returns the worst relative error
/// |a - n| / max(|a| + |n|, floor).
inline double gradient_error(Tensor<double>& t, const Tensor<double>& analytic, const std::function<double()>& loss,
                             std::mt19937_64& rng, int samples = 40, double h = 1e-5, double floor = 1e-7) {
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  if (static_cast<int>(idx.size()) > samples) idx.resize(samples);
  double worst = 0;
  for (std::size_t i : idx) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = loss();
    t[i] = saved - h;
    const double down = loss();
    t[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor));
  }
  return worst;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sola_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace sola::test
