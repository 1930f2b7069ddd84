// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lkt/dataset.hpp"
#include "lkt/metrics.hpp"
#include "lkt/models.hpp"
#include "lkt/tokenizer.hpp"
#include "lkt/training.hpp"

namespace lkt {

struct Predictions {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t size() const { return scores.size(); }
  void append(const Predictions& other);
};

/// Evaluation masks interaction i of a window in pass (i mod G), G = ceil(1/rate),
/// so every response is predicted once while most of the history stays visible.
std::size_t evaluation_groups(double mask_rate);

template <typename T>
Predictions predict_lkt(const LktModel<T>& model, std::span<const LktSequence> windows,
                        double mask_rate = 0.15);

template <typename T>
Predictions predict_dkt(const DktModel<T>& model, std::span<const DktExample> examples);

std::vector<LktSequence> lkt_windows(const Dataset& data, const Vocabulary& vocab,
                                     std::size_t max_len);
std::vector<DktExample> dkt_examples(const Dataset& data, const QuestionIndex& index,
                                     UnseenQuestion policy);

struct EvalReport {
  double auc = 0.0;
  double acc = 0.0;
  std::size_t n_predictions = 0;
  /// "fold=2", "fraction=0.01", "seq_len=20", "zero_shot", ...
  std::string protocol;
  std::string model;
  std::uint64_t seed = 0;
};

/// Throws like auc() when the labels hold a single class.
EvalReport make_report(const Predictions& predictions, std::string protocol, std::string model,
                       std::uint64_t seed);

std::string to_json_line(const EvalReport& report);
void append_json_line(const std::filesystem::path& path, const std::string& line);

/// AUC of the generator probabilities against the sampled responses.
double bayes_ceiling_auc(const Dataset& data, const std::vector<std::vector<double>>& true_p);

enum class ModelKind { kLkt, kDkt };
std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

struct ExperimentConfig {
  ModelKind model = ModelKind::kLkt;
  LktConfig lkt = [] {
    LktConfig c;
    c.init = InitScheme::kLocal;
    c.dropout_p = 0.0;
    return c;
  }();
  std::size_t dkt_hidden = 64;
  /// Tuned on the synthetic generator (500 students).
  TrainConfig train = [] {
    TrainConfig t;
    t.batch_size = t.micro_batch_size = 8;
    t.peak_lr = 1.5e-3;
    t.warmup_steps = 20;
    return t;
  }();
  TrainConfig dkt_train = [] {
    TrainConfig t;
    t.batch_size = t.micro_batch_size = 8;
    t.peak_lr = 1e-3;
    t.warmup_steps = 20;
    return t;
  }();
  /// Share of the training students held out for early stopping.
  double val_fraction = 0.1;
};

/// Splits `ids` into (kept, held_out) with |held_out| = round(fraction * n),
/// at least 1 and at most n - 1.
std::pair<std::vector<std::string>, std::vector<std::string>> holdout_split(
    std::vector<std::string> ids, double fraction, std::uint64_t seed);

template <typename T>
struct LktFit {
  LktModel<T> model;
  TrainResult result;
};

template <typename T>
struct DktFit {
  DktModel<T> model;
  QuestionIndex questions;
  TrainResult result;
};

/// Trains an LKT model on `train`, early-stopping on `val`. Starts from
/// `init` when given (fine-tuning), otherwise from a fresh model.
template <typename T>
LktFit<T> fit_lkt(const Dataset& train, const Dataset& val, const Vocabulary& vocab,
                  const ExperimentConfig& config, const LktModel<T>* init = nullptr,
                  const EpochCallback& on_epoch = {});

template <typename T>
DktFit<T> fit_dkt(const Dataset& train, const Dataset& val, const ExperimentConfig& config,
                  const EpochCallback& on_epoch = {});

struct CvSummary {
  std::vector<EvalReport> folds;
  MeanStd auc;
  MeanStd acc;
};

CvSummary summarize_folds(std::vector<EvalReport> folds);

/// k-fold cross-validation at student level. Training errors are rethrown
/// with the fold id prefixed.
template <typename T>
CvSummary run_cv(const Dataset& data, const Vocabulary& vocab, const ExperimentConfig& config,
                 std::size_t k = 5, std::uint64_t seed = 0);

struct ColdStartSplit {
  std::vector<std::string> test;
  std::vector<std::string> val;
  /// Training pool in subsampling order; fraction f uses its first floor(f*n).
  std::vector<std::string> pool;
};

ColdStartSplit coldstart_split(const Dataset& target, double test_fraction, double val_fraction,
                               std::uint64_t seed);

/// Students used at `fraction`; throws ValidationError for fewer than one.
std::vector<std::string> fraction_subset(const ColdStartSplit& split, double fraction);

struct ColdStartOptions {
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  bool include_dkt = true;
};

/// For each fraction: fine-tune a copy of `pretrained` on the subsample and
/// train a DKT from scratch on it; both are scored on the fixed test split.
template <typename T>
std::vector<EvalReport> coldstart_fraction_sweep(const LktModel<T>& pretrained,
                                                 const Dataset& target, const Vocabulary& vocab,
                                                 std::span<const double> fractions,
                                                 const ExperimentConfig& config,
                                                 const ColdStartOptions& options = {},
                                                 std::uint64_t seed = 0);

/// Truncates each history to its first L interactions and predicts the L-th.
template <typename T>
std::vector<EvalReport> seq_length_buckets(const LktModel<T>& model, const Dataset& data,
                                           const Vocabulary& vocab,
                                           std::span<const std::size_t> buckets,
                                           std::uint64_t seed = 0);

template <typename T>
std::vector<EvalReport> seq_length_buckets(const DktModel<T>& model, const QuestionIndex& index,
                                           const Dataset& data,
                                           std::span<const std::size_t> buckets,
                                           std::uint64_t seed = 0);

/// LKT without updates, and DKT with every unseen question mapped to the
/// sentinel index.
template <typename T>
std::pair<EvalReport, EvalReport> zero_shot_eval(const LktModel<T>& lkt, const Vocabulary& vocab,
                                                 const DktModel<T>& dkt,
                                                 const QuestionIndex& dkt_questions,
                                                 const Dataset& target, double mask_rate = 0.15,
                                                 std::uint64_t seed = 0);

}  // namespace lkt
