// SPDX-License-Identifier: Apache-2.0
#include "lkt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

#include "lkt/autodiff.hpp"

namespace lkt {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("auc: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Walk groups of equal score from low to high, counting negatives seen.
  std::uint64_t neg_below = 0, positives = 0, negatives = 0;
  std::uint64_t twice_credit = 0;  // 2 * concordant + tied
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos_here : neg_here)++;
      ++j;
    }
    twice_credit += 2 * pos_here * neg_below + pos_here * neg_here;
    neg_below += neg_here;
    positives += pos_here;
    negatives += neg_here;
    i = j;
  }
  if (positives == 0 || negatives == 0) {
    throw std::invalid_argument("AUC undefined: labels contain a single class");
  }
  return static_cast<double>(twice_credit) / (2.0 * static_cast<double>(positives) *
                                              static_cast<double>(negatives));
}

double acc(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw std::invalid_argument("acc: length mismatch");
  if (scores.empty()) throw std::invalid_argument("acc: no predictions");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((scores[i] >= threshold ? 1 : 0) == (labels[i] ? 1 : 0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double mean_bce(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw std::invalid_argument("mean_bce: length mismatch");
  if (probs.empty()) throw std::invalid_argument("mean_bce: no masked positions");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    total -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

MeanStd mean_and_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_and_std: no values");
  MeanStd out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace lkt
