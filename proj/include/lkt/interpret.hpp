// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lkt/dataset.hpp"
#include "lkt/models.hpp"
#include "lkt/tokenizer.hpp"

namespace lkt {

struct AttentionSummary {
  std::size_t layer = 0;
  std::size_t head = 0;
  /// Mean over unpadded query positions of attention[query][key], one per key.
  std::vector<double> scores;
  std::vector<std::string> tokens;
};

/// Trailing [PAD] tokens of `example` are treated as padding. `vocab` (optional)
/// fills the token strings.
template <typename T>
AttentionSummary mean_attention(const LktModel<T>& model, const LktExample& example,
                                std::size_t layer, std::size_t head,
                                const Vocabulary* vocab = nullptr);

struct LimeOptions {
  std::size_t num_samples = 1000;
  /// <= 0 selects 0.75 * sqrt(number of perturbable tokens).
  double kernel_width = 0.0;
  double ridge = 1e-3;
  std::uint64_t seed = 0;
};

struct Explanation {
  /// Token positions that were perturbed at least once, ascending.
  std::vector<std::size_t> positions;
  std::vector<std::string> tokens;
  std::vector<double> weights;
  double intercept = 0.0;
  /// Kernel-weighted R^2 of the local fit.
  double r2 = 0.0;
  std::size_t num_samples = 0;
  double kernel_width = 0.0;
};

/// Maps a (possibly perturbed) token sequence to a score.
using Scorer = std::function<double(std::span<const TokenId>)>;

/// LIME over token presence: absent tokens become [UNK]; the first sample is
/// the unperturbed input. Fits a kernel-weighted ridge regression with an
/// unpenalised intercept. Throws ValidationError when no sample differs from
/// the others.
Explanation lime_explain(const Scorer& scorer, std::span<const TokenId> token_ids,
                         std::span<const std::size_t> perturbable, const LimeOptions& options,
                         const Vocabulary* vocab = nullptr);

/// Explains the model's correctness probability at `target_mask_position`.
/// Every non-special token except the target is perturbable.
template <typename T>
Explanation lime_explain(const LktModel<T>& model, const LktExample& example,
                         std::size_t target_mask_position, const LimeOptions& options = {},
                         const Vocabulary* vocab = nullptr);

std::string to_json(const AttentionSummary& summary);
std::string to_json(const Explanation& explanation);

enum class PositionRule { kMaskPosition, kCls };
std::string to_string(PositionRule rule);
PositionRule parse_position_rule(const std::string& text);

struct EmbeddingRow {
  std::string student_id;
  std::vector<double> vector;
  /// Correctness probability at the example's first mask position.
  double prediction = 0.0;
};

/// Final-layer hidden state at the first mask position or at [CLS]. Every
/// example needs at least one mask position.
template <typename T>
std::vector<EmbeddingRow> export_embeddings(const LktModel<T>& model,
                                            std::span<const LktExample> examples,
                                            PositionRule rule);

/// Header `student_id,e0..e{d-1},prediction`.
std::string embeddings_csv(std::span<const EmbeddingRow> rows);
void save_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRow> rows);

}  // namespace lkt
