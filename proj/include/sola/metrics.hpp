#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sola/error.hpp"

namespace sola {

/// ROC AUC as the Mann-Whitney statistic: rank all scores with midranks for
/// ties, then (R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc is undefined: dataset contains a single class");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum += mid;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * n);
}

inline double accuracy(std::span<const double> probabilities, std::span<const int> labels, double threshold = 0.5) {
  if (probabilities.size() != labels.size() || probabilities.empty())
    throw MetricError("accuracy: need equally sized, non-empty inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += (probabilities[i] >= threshold) == (labels[i] == 1);
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace sola
