// SPDX-License-Identifier: Apache-2.0
//
// The LKT encoder (pre-norm transformer over interaction text with a
// masked-correctness head and an MLM head) and the DKT recurrent baseline.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lkt/autodiff.hpp"
#include "lkt/dataset.hpp"
#include "lkt/parameters.hpp"
#include "lkt/random.hpp"
#include "lkt/tokenizer.hpp"

namespace lkt {

enum class HeadType { kResponse, kMlm };

std::string to_string(HeadType head);
HeadType parse_head_type(const std::string& text);

/// kNormal: truncated normal(0, 0.02) everywhere. kLocal: additionally starts
/// position embeddings as sinusoids (amplitude 0.1) and the query/key projections
/// at identity plus noise, so early attention favours nearby tokens.
enum class InitScheme { kNormal, kLocal };

std::string to_string(InitScheme scheme);
InitScheme parse_init_scheme(const std::string& text);

struct LktConfig {
  std::size_t vocab_size = special::kCount;
  std::size_t d_model = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_len = 512;
  double dropout_p = 0.1;
  HeadType head_type = HeadType::kResponse;
  InitScheme init = InitScheme::kNormal;

  /// Throws ValidationError on inconsistent settings.
  void validate() const;
};

template <typename T>
class LktModel {
 public:
  /// Truncated normal(0, 0.02) weights, zero biases, unit layer-norm gains.
  LktModel(const LktConfig& config, std::uint64_t seed);

  const LktConfig& config() const { return config_; }
  LktConfig& mutable_config() { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  Checkpoint to_checkpoint() const;
  static LktModel from_checkpoint(const Checkpoint& checkpoint);

 private:
  LktConfig config_;
  ParameterSet<T> params_;
};

template <typename T>
LktModel<T> init_parameters(const LktConfig& config, std::uint64_t seed) {
  return LktModel<T>(config, seed);
}

/// One sequence of a batch. Positions >= length are padding: they are never
/// attended to and their token ids are ignored.
struct LktInput {
  std::span<const TokenId> token_ids;
  std::size_t length = 0;
};

template <typename T>
struct EncoderOutput {
  Var<T> hidden;  // [L x d] after the final layer norm
  /// attention[layer][head] is an [L x L] row-stochastic matrix.
  std::vector<std::vector<Tensor<T>>> attention;
};

/// Binds a model's parameters to a tape and builds the forward graph.
template <typename T>
class LktGraph {
 public:
  LktGraph(const LktModel<T>& model, Tape<T>& tape, bool requires_grad);

  EncoderOutput<T> encode(const LktInput& input, bool training, Rng* rng,
                          bool keep_attention = false) const;
  /// Correctness logits at `positions`, shape [n x 1].
  Var<T> response_logits(const Var<T>& hidden, std::span<const std::size_t> positions) const;
  /// Vocabulary logits at `positions`, shape [n x V].
  Var<T> mlm_logits(const Var<T>& hidden, std::span<const std::size_t> positions) const;

  /// Adds the gradients gathered on this graph into the model's buffers.
  void accumulate_gradients(LktModel<T>& model) const;

 private:
  const LktModel<T>& model_;
  std::vector<Var<T>> bound_;
};

template <typename T>
struct SequenceOutput {
  std::vector<TokenId> token_ids;
  std::size_t length = 0;
  /// Per-position logits of the configured head: [L x 1] or [L x V].
  Tensor<T> logits;
  Tensor<T> hidden;
  std::vector<std::vector<Tensor<T>>> attention;
};

template <typename T>
struct ForwardOutput {
  std::vector<SequenceOutput<T>> sequences;
};

template <typename T>
ForwardOutput<T> lkt_forward(const LktModel<T>& model, std::span<const LktInput> batch,
                             bool training, Rng& rng, bool keep_attention = true);

/// sigmoid(logit) at each mask position. Throws if the configured head is not
/// the response head or a position does not hold [MASK].
template <typename T>
std::vector<double> predict_masked_correctness(const SequenceOutput<T>& output,
                                               std::span<const std::size_t> mask_positions,
                                               HeadType head = HeadType::kResponse);

/// Probability of a correct answer at each mask position of `example`, with
/// dropout off.
template <typename T>
std::vector<double> predict_example(const LktModel<T>& model, const LktExample& example);

/// Binary cross-entropy between predictions and labels.
template <typename T>
Var<T> lkt_loss(const Var<T>& probs, std::span<const T> labels, double denominator = 0.0) {
  return bce_loss(probs, labels, denominator);
}

/// Mean cross-entropy over masked positions of a batch of plain-text examples.
/// Accumulates gradients into the model when `backward` is true.
template <typename T>
double mlm_forward_loss(LktModel<T>& model, std::span<const MlmExample> batch, bool training,
                        Rng& rng, bool backward);

// ---- DKT ------------------------------------------------------------------------

struct DktConfig {
  std::size_t num_questions = 1;
  std::size_t hidden = 64;
};

template <typename T>
class DktModel {
 public:
  DktModel(const DktConfig& config, std::uint64_t seed);

  const DktConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  /// Prediction for questions the model has never seen: sigmoid of the mean
  /// output bias, independent of the input history.
  double prior() const;

  Checkpoint to_checkpoint(const QuestionIndex& questions) const;
  static DktModel from_checkpoint(const Checkpoint& checkpoint);

 private:
  DktConfig config_;
  ParameterSet<T> params_;
};

/// Question index stored alongside a DKT checkpoint's weights.
QuestionIndex dkt_checkpoint_questions(const Checkpoint& checkpoint);

template <typename T>
class DktGraph {
 public:
  DktGraph(const DktModel<T>& model, Tape<T>& tape, bool requires_grad);

  /// Logits [T x Q]; row t depends only on inputs before step t.
  Var<T> logits(std::span<const std::int32_t> input_indices) const;

  void accumulate_gradients(DktModel<T>& model) const;

 private:
  const DktModel<T>& model_;
  std::vector<Var<T>> bound_;
};

/// Per-step probability over all Q questions, shape [T x Q].
template <typename T>
Tensor<T> dkt_forward(const DktModel<T>& model, const DktExample& example);

/// Probability for each step's own question; the prior for unseen questions.
template <typename T>
std::vector<double> dkt_predict_targets(const DktModel<T>& model, const DktExample& example);

}  // namespace lkt
