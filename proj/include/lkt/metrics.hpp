// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

namespace lkt {

/// Mann-Whitney AUC: (concordant pairs + 0.5 * tied pairs) / (#pos * #neg).
/// Throws std::invalid_argument ("AUC undefined") unless both classes occur.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of predictions where (score >= threshold) == label.
double acc(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
double mean_bce(std::span<const double> probs, std::span<const int> labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

MeanStd mean_and_std(std::span<const double> values);

}  // namespace lkt
