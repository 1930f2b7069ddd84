// SPDX-License-Identifier: Apache-2.0
#include "lkt/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "json.hpp"
#include "lkt/errors.hpp"
#include "lkt/evaluation.hpp"

namespace lkt {

std::string to_string(Precision precision) {
  return precision == Precision::kF64 ? "f64" : "f32";
}

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "32") return Precision::kF32;
  if (text == "f64" || text == "64") return Precision::kF64;
  throw ValidationError("precision must be f32 or f64, got '" + text + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0 || micro_batch_size == 0) {
    throw ValidationError("batch_size and micro_batch_size must be positive");
  }
  if (micro_batch_size > batch_size || batch_size % micro_batch_size != 0) {
    throw ValidationError("micro_batch_size (" + std::to_string(micro_batch_size) +
                          ") must divide batch_size (" + std::to_string(batch_size) + ")");
  }
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ValidationError("peak_lr must be > 0");
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ValidationError("mask_rate must be in (0, 1]");
}

// ---- optimizer ------------------------------------------------------------------

namespace {

template <typename T>
void adam_update(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, double lr,
                 double c1, double c2, const AdamOptions& o) {
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double gj = static_cast<double>(g[j]);
    const double mj = o.beta1 * static_cast<double>(m[j]) + (1.0 - o.beta1) * gj;
    const double vj = o.beta2 * static_cast<double>(v[j]) + (1.0 - o.beta2) * gj * gj;
    m[j] = static_cast<T>(mj);
    v[j] = static_cast<T>(vj);
    const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + o.eps);
    p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
  }
}

template <typename T>
void ensure_moments(AdamState<T>& state, std::size_t count, auto shape_of) {
  if (state.m.empty() && state.v.empty()) {
    for (std::size_t i = 0; i < count; ++i) {
      state.m.emplace_back(shape_of(i));
      state.v.emplace_back(shape_of(i));
    }
  }
  if (state.m.size() != count || state.v.size() != count) {
    throw DimensionError("adam_step: state has " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(count) + " parameters");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (state.m[i].shape() != shape_of(i) || state.v[i].shape() != shape_of(i)) {
      throw DimensionError("adam_step: moment shape mismatch at parameter " + std::to_string(i));
    }
  }
}

}  // namespace

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads,
               AdamState<T>& state, double lr, const AdamOptions& options) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw DimensionError("adam_step: gradient " + shape_to_string(grads[i].shape()) +
                           " for parameter " + shape_to_string(params[i].shape()));
    }
  }
  ensure_moments(state, params.size(), [&](std::size_t i) { return params[i].shape(); });
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i], grads[i], state.m[i], state.v[i], lr, c1, c2, options);
  }
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr,
               const AdamOptions& options) {
  ensure_moments(state, params.size(), [&](std::size_t i) { return params[i].value.shape(); });
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i].value, params[i].grad, state.m[i], state.v[i], lr, c1, c2, options);
  }
}

double lr_at(std::size_t step, double peak_lr, std::size_t warmup_steps, std::size_t total_steps) {
  if (step < warmup_steps) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return total_steps <= warmup_steps ? peak_lr : 0.0;
  return peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

// ---- epoch loop -------------------------------------------------------------------

std::string to_json_line(const EpochRecord& r) {
  auto finite_or_null = [](double x) {
    return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = finite_or_null(r.train_loss);
  j["val_loss"] = finite_or_null(r.val_loss);
  j["val_auc"] = finite_or_null(r.val_auc);
  j["lr"] = r.lr;
  return j.dump();
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t last_finite_epoch,
                                   TrainResult partial)
    : std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(epoch) +
                         "; last finite epoch " + std::to_string(last_finite_epoch)),
      epoch_(epoch),
      last_finite_epoch_(last_finite_epoch),
      partial_(std::move(partial)) {}

namespace {

template <typename T>
std::vector<Tensor<T>> snapshot(const ParameterSet<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

template <typename T>
void restore(ParameterSet<T>& params, const std::vector<Tensor<T>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

}  // namespace

template <typename T>
TrainResult train(TrainingTask<T>& task, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const std::size_t n = task.num_examples();
  if (n == 0) throw ValidationError("train: empty training set");

  auto& params = task.parameters();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.max_epochs;

  TrainResult result;
  std::vector<Tensor<T>> best = snapshot(params);
  if (config.evaluate_initial) {
    const auto v = task.validate();
    result.best_val_loss = v.loss;
    result.best_val_auc = v.auc;
  }

  AdamState<T> adam;
  std::size_t bad_epochs = 0;
  std::size_t last_finite = 0;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    task.prepare_epoch(epoch, config.seed);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, {0x5u, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Rng dropout_rng(derive_seed(config.seed, {0xDu, epoch}));

    double loss_sum = 0.0, term_sum = 0.0, lr = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      double denominator = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        denominator += static_cast<double>(task.loss_terms(order[i]));
      }
      if (denominator == 0.0) continue;
      params.zero_grad();
      for (std::size_t m = start; m < stop; m += config.micro_batch_size) {
        const std::size_t mstop = std::min(stop, m + config.micro_batch_size);
        loss_sum += task.accumulate(std::span<const std::size_t>(order).subspan(m, mstop - m),
                                    denominator, dropout_rng);
      }
      term_sum += denominator;
      lr = lr_at(result.steps + 1, config.peak_lr, config.warmup_steps, total_steps);
      adam_step(params, adam, lr);
      ++result.steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = term_sum > 0.0 ? loss_sum / term_sum : 0.0;
    rec.lr = lr;
    if (std::isfinite(rec.train_loss)) {
      const auto v = task.validate();
      rec.val_loss = v.loss;
      rec.val_auc = v.auc;
    } else {
      rec.val_loss = std::numeric_limits<double>::quiet_NaN();
      rec.val_auc = std::numeric_limits<double>::quiet_NaN();
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      restore(params, best);
      throw TrainingDiverged(epoch, last_finite, std::move(result));
    }
    last_finite = epoch;

    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_val_auc = rec.val_auc;
      result.best_epoch = epoch;
      best = snapshot(params);
      bad_epochs = 0;
    } else if (++bad_epochs >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(params, best);
  return result;
}

// ---- LKT task -----------------------------------------------------------------------

template <typename T>
LktTrainingTask<T>::LktTrainingTask(LktModel<T>& model, std::vector<LktSequence> train_windows,
                                    std::vector<LktSequence> val_windows, double mask_rate)
    : model_(model),
      train_(std::move(train_windows)),
      val_(std::move(val_windows)),
      mask_rate_(mask_rate) {
  if (model_.config().head_type != HeadType::kResponse) {
    throw ValidationError("LKT training needs head_type = response");
  }
  if (val_.empty()) throw ValidationError("LKT training: empty validation set");
  std::erase_if(train_, [](const LktSequence& s) { return s.interaction_count() == 0; });
}

template <typename T>
void LktTrainingTask<T>::prepare_epoch(std::size_t epoch, std::uint64_t seed) {
  masked_.clear();
  masked_.reserve(train_.size());
  for (std::size_t i = 0; i < train_.size(); ++i) {
    masked_.push_back(mask_responses(train_[i], mask_rate_, derive_seed(seed, {0x3u, epoch, i})));
  }
}

template <typename T>
double LktTrainingTask<T>::accumulate(std::span<const std::size_t> examples, double denominator,
                                      Rng& rng) {
  Tape<T> tape(true);
  LktGraph<T> graph(model_, tape, true);
  std::vector<Var<T>> probs;
  std::vector<T> labels;
  for (auto i : examples) {
    const auto& ex = masked_[i];
    auto enc = graph.encode({ex.token_ids, ex.token_ids.size()}, true, &rng);
    probs.push_back(sigmoid(graph.response_logits(enc.hidden, ex.mask_positions)));
    for (int y : ex.labels) labels.push_back(static_cast<T>(y));
  }
  auto all = probs.size() == 1 ? probs.front() : concat_rows(probs);
  auto loss = bce_loss(all, std::span<const T>(labels), denominator);
  tape.backward(loss);
  graph.accumulate_gradients(model_);
  return static_cast<double>(loss.value()[0]) * denominator;
}

template <typename T>
ValidationResult LktTrainingTask<T>::validate() {
  const auto preds = predict_lkt(model_, std::span<const LktSequence>(val_), mask_rate_);
  ValidationResult out;
  out.loss = mean_bce(preds.scores, preds.labels);
  try {
    out.auc = auc(preds.scores, preds.labels);
  } catch (const std::invalid_argument&) {
  }
  return out;
}

// ---- MLM task -----------------------------------------------------------------------

template <typename T>
MlmTrainingTask<T>::MlmTrainingTask(LktModel<T>& model,
                                    std::vector<std::vector<TokenId>> train_sequences,
                                    std::vector<std::vector<TokenId>> val_sequences,
                                    double mask_rate)
    : model_(model), train_(std::move(train_sequences)), mask_rate_(mask_rate) {
  if (model_.config().head_type != HeadType::kMlm) {
    throw ValidationError("MLM pretraining needs head_type = mlm");
  }
  const std::size_t V = model_.config().vocab_size;
  for (std::size_t i = 0; i < val_sequences.size(); ++i) {
    auto ex = mask_tokens_mlm(val_sequences[i], V, mask_rate_, derive_seed(0, {0xFu, i}));
    if (!ex.positions.empty()) val_.push_back(std::move(ex));
  }
  if (val_.empty()) throw ValidationError("MLM pretraining: empty validation set");
}

template <typename T>
void MlmTrainingTask<T>::prepare_epoch(std::size_t epoch, std::uint64_t seed) {
  masked_.clear();
  masked_.reserve(train_.size());
  const std::size_t V = model_.config().vocab_size;
  for (std::size_t i = 0; i < train_.size(); ++i) {
    masked_.push_back(mask_tokens_mlm(train_[i], V, mask_rate_, derive_seed(seed, {0xEu, epoch, i})));
  }
}

template <typename T>
double MlmTrainingTask<T>::accumulate(std::span<const std::size_t> examples, double denominator,
                                      Rng& rng) {
  Tape<T> tape(true);
  LktGraph<T> graph(model_, tape, true);
  Var<T> loss;
  for (auto i : examples) {
    const auto& ex = masked_[i];
    if (ex.positions.empty()) continue;
    auto enc = graph.encode({ex.token_ids, ex.token_ids.size()}, true, &rng);
    auto part = cross_entropy_rows(graph.mlm_logits(enc.hidden, ex.positions),
                                   std::span<const std::int32_t>(ex.targets), denominator);
    loss = loss.valid() ? add(loss, part) : part;
  }
  if (!loss.valid()) return 0.0;
  tape.backward(loss);
  graph.accumulate_gradients(model_);
  return static_cast<double>(loss.value()[0]) * denominator;
}

template <typename T>
ValidationResult MlmTrainingTask<T>::validate() {
  Rng rng(0);
  ValidationResult out;
  out.loss = mlm_forward_loss(model_, std::span<const MlmExample>(val_), false, rng, false);
  return out;
}

// ---- DKT task -----------------------------------------------------------------------

template <typename T>
DktTrainingTask<T>::DktTrainingTask(DktModel<T>& model, std::vector<DktExample> train_examples,
                                    std::vector<DktExample> val_examples)
    : model_(model), train_(std::move(train_examples)), val_(std::move(val_examples)) {
  if (val_.empty()) throw ValidationError("DKT training: empty validation set");
  std::erase_if(train_, [](const DktExample& e) { return e.question_indices.empty(); });
}

template <typename T>
std::size_t DktTrainingTask<T>::loss_terms(std::size_t i) const {
  return static_cast<std::size_t>(std::count_if(train_[i].question_indices.begin(),
                                                train_[i].question_indices.end(),
                                                [](std::int32_t q) { return q >= 0; }));
}

template <typename T>
double DktTrainingTask<T>::accumulate(std::span<const std::size_t> examples, double denominator,
                                      Rng&) {
  Tape<T> tape(true);
  DktGraph<T> graph(model_, tape, true);
  Var<T> loss;
  for (auto i : examples) {
    const auto& ex = train_[i];
    std::vector<std::size_t> rows, cols;
    std::vector<T> labels;
    for (std::size_t t = 0; t < ex.question_indices.size(); ++t) {
      if (ex.question_indices[t] < 0) continue;
      rows.push_back(t);
      cols.push_back(static_cast<std::size_t>(ex.question_indices[t]));
      labels.push_back(static_cast<T>(ex.responses[t]));
    }
    if (rows.empty()) continue;
    const auto inputs = ex.input_indices();
    auto probs = sigmoid(gather_elements(graph.logits(inputs), rows, cols));
    auto part = bce_loss(probs, std::span<const T>(labels), denominator);
    loss = loss.valid() ? add(loss, part) : part;
  }
  if (!loss.valid()) return 0.0;
  tape.backward(loss);
  graph.accumulate_gradients(model_);
  return static_cast<double>(loss.value()[0]) * denominator;
}

template <typename T>
ValidationResult DktTrainingTask<T>::validate() {
  const auto preds = predict_dkt(model_, std::span<const DktExample>(val_));
  ValidationResult out;
  out.loss = mean_bce(preds.scores, preds.labels);
  try {
    out.auc = auc(preds.scores, preds.labels);
  } catch (const std::invalid_argument&) {
  }
  return out;
}

#define LKT_INSTANTIATE(T)                                                                  \
  template void adam_step(std::span<Tensor<T>>, std::span<const Tensor<T>>, AdamState<T>&, \
                          double, const AdamOptions&);                                      \
  template void adam_step(ParameterSet<T>&, AdamState<T>&, double, const AdamOptions&);     \
  template TrainResult train(TrainingTask<T>&, const TrainConfig&, const EpochCallback&);   \
  template class LktTrainingTask<T>;                                                        \
  template class DktTrainingTask<T>;                                                        \
  template class MlmTrainingTask<T>;

LKT_INSTANTIATE(float)
LKT_INSTANTIATE(double)

#undef LKT_INSTANTIATE

}  // namespace lkt
