// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lkt/dataset.hpp"
#include "lkt/models.hpp"
#include "lkt/parameters.hpp"
#include "lkt/random.hpp"

namespace lkt {

enum class Precision { kF32, kF64 };

std::string to_string(Precision precision);
Precision parse_precision(const std::string& text);

struct TrainConfig {
  std::size_t max_epochs = 200;
  /// Consecutive epochs without a validation-loss improvement before stopping.
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  std::size_t micro_batch_size = 32;
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 200;
  std::uint64_t seed = 0;
  Precision precision = Precision::kF32;
  double mask_rate = 0.15;
  /// Validate before the first update and keep the initial weights as the
  /// best candidate (used when fine-tuning).
  bool evaluate_initial = false;

  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are created on the first call; a shape
/// mismatch throws DimensionError.
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads,
               AdamState<T>& state, double lr, const AdamOptions& options = {});

/// Same update, reading gradients from the parameter buffers.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr,
               const AdamOptions& options = {});

/// Linear warmup 0 -> peak over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
double lr_at(std::size_t step, double peak_lr, std::size_t warmup_steps, std::size_t total_steps);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_auc = 0.0;  // NaN when validation labels hold a single class
  double lr = 0.0;
};

std::string to_json_line(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> history;
  /// 0 means the initial weights were kept (evaluate_initial).
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double best_val_auc = std::numeric_limits<double>::quiet_NaN();
  std::size_t steps = 0;
  bool stopped_early = false;
};

/// NaN or infinite loss. Parameters are restored to the best checkpoint
/// before this is thrown.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t last_finite_epoch, TrainResult partial);
  std::size_t epoch() const { return epoch_; }
  std::size_t last_finite_epoch() const { return last_finite_epoch_; }
  const TrainResult& partial() const { return partial_; }

 private:
  std::size_t epoch_;
  std::size_t last_finite_epoch_;
  TrainResult partial_;
};

struct ValidationResult {
  double loss = 0.0;
  double auc = std::numeric_limits<double>::quiet_NaN();
};

/// What the epoch loop needs from a model family.
template <typename T>
class TrainingTask {
 public:
  virtual ~TrainingTask() = default;

  virtual ParameterSet<T>& parameters() = 0;
  virtual std::size_t num_examples() const = 0;
  /// Draws this epoch's masks (if any).
  virtual void prepare_epoch(std::size_t epoch, std::uint64_t seed) = 0;
  /// Number of loss terms example `i` contributes this epoch.
  virtual std::size_t loss_terms(std::size_t i) const = 0;
  /// Adds d(sum of losses over `examples` / denominator) to the parameter
  /// gradients and returns the summed (unnormalised) loss.
  virtual double accumulate(std::span<const std::size_t> examples, double denominator,
                            Rng& rng) = 0;
  virtual ValidationResult validate() = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Epoch loop with seeded shuffling, gradient accumulation, warmup schedule
/// and early stopping on validation loss. On return the task's parameters hold
/// the best-validation weights.
template <typename T>
TrainResult train(TrainingTask<T>& task, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Masked-response training over LKT windows.
template <typename T>
class LktTrainingTask final : public TrainingTask<T> {
 public:
  LktTrainingTask(LktModel<T>& model, std::vector<LktSequence> train_windows,
                  std::vector<LktSequence> val_windows, double mask_rate);

  ParameterSet<T>& parameters() override { return model_.parameters(); }
  std::size_t num_examples() const override { return train_.size(); }
  void prepare_epoch(std::size_t epoch, std::uint64_t seed) override;
  std::size_t loss_terms(std::size_t i) const override { return masked_[i].labels.size(); }
  double accumulate(std::span<const std::size_t> examples, double denominator,
                    Rng& rng) override;
  ValidationResult validate() override;

 private:
  LktModel<T>& model_;
  std::vector<LktSequence> train_;
  std::vector<LktSequence> val_;
  double mask_rate_;
  std::vector<LktExample> masked_;
};

/// Masked-language-model pretraining over token sequences. Validation masks
/// are fixed; the reported AUC is NaN.
template <typename T>
class MlmTrainingTask final : public TrainingTask<T> {
 public:
  MlmTrainingTask(LktModel<T>& model, std::vector<std::vector<TokenId>> train_sequences,
                  std::vector<std::vector<TokenId>> val_sequences, double mask_rate);

  ParameterSet<T>& parameters() override { return model_.parameters(); }
  std::size_t num_examples() const override { return train_.size(); }
  void prepare_epoch(std::size_t epoch, std::uint64_t seed) override;
  std::size_t loss_terms(std::size_t i) const override { return masked_[i].positions.size(); }
  double accumulate(std::span<const std::size_t> examples, double denominator,
                    Rng& rng) override;
  ValidationResult validate() override;

 private:
  LktModel<T>& model_;
  std::vector<std::vector<TokenId>> train_;
  std::vector<MlmExample> val_;
  double mask_rate_;
  std::vector<MlmExample> masked_;
};

/// Next-step prediction over DKT sequences.
template <typename T>
class DktTrainingTask final : public TrainingTask<T> {
 public:
  DktTrainingTask(DktModel<T>& model, std::vector<DktExample> train_examples,
                  std::vector<DktExample> val_examples);

  ParameterSet<T>& parameters() override { return model_.parameters(); }
  std::size_t num_examples() const override { return train_.size(); }
  void prepare_epoch(std::size_t, std::uint64_t) override {}
  std::size_t loss_terms(std::size_t i) const override;
  double accumulate(std::span<const std::size_t> examples, double denominator,
                    Rng& rng) override;
  ValidationResult validate() override;

 private:
  DktModel<T>& model_;
  std::vector<DktExample> train_;
  std::vector<DktExample> val_;
};

}  // namespace lkt
