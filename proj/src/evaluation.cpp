// SPDX-License-Identifier: Apache-2.0
#include "lkt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lkt/errors.hpp"

namespace lkt {

void Predictions::append(const Predictions& other) {
  scores.insert(scores.end(), other.scores.begin(), other.scores.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

std::size_t evaluation_groups(double mask_rate) {
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) {
    throw ValidationError("mask_rate must be in (0, 1]");
  }
  return static_cast<std::size_t>(std::ceil(1.0 / mask_rate - 1e-9));
}

template <typename T>
Predictions predict_lkt(const LktModel<T>& model, std::span<const LktSequence> windows,
                        double mask_rate) {
  const std::size_t groups = evaluation_groups(mask_rate);
  Predictions out;
  std::vector<std::size_t> targets;
  for (const auto& w : windows) {
    const std::size_t n = w.interaction_count();
    for (std::size_t g = 0; g < groups && g < n; ++g) {
      targets.clear();
      for (std::size_t i = g; i < n; i += groups) targets.push_back(i);
      const auto ex = mask_interactions(w, targets);
      const auto probs = predict_example(model, ex);
      out.scores.insert(out.scores.end(), probs.begin(), probs.end());
      out.labels.insert(out.labels.end(), ex.labels.begin(), ex.labels.end());
    }
  }
  return out;
}

template <typename T>
Predictions predict_dkt(const DktModel<T>& model, std::span<const DktExample> examples) {
  Predictions out;
  for (const auto& ex : examples) {
    if (ex.question_indices.empty()) continue;
    const auto probs = dkt_predict_targets(model, ex);
    out.scores.insert(out.scores.end(), probs.begin(), probs.end());
    out.labels.insert(out.labels.end(), ex.responses.begin(), ex.responses.end());
  }
  return out;
}

std::vector<LktSequence> lkt_windows(const Dataset& data, const Vocabulary& vocab,
                                     std::size_t max_len) {
  std::vector<LktSequence> out;
  for (const auto& s : data) {
    if (s.records.empty()) continue;
    auto windows = window_sequence(format_lkt_sequence(s.records, vocab), max_len);
    for (auto& w : windows) out.push_back(std::move(w));
  }
  return out;
}

std::vector<DktExample> dkt_examples(const Dataset& data, const QuestionIndex& index,
                                     UnseenQuestion policy) {
  std::vector<DktExample> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(encode_dkt(s.records, index, policy));
  return out;
}

EvalReport make_report(const Predictions& predictions, std::string protocol, std::string model,
                       std::uint64_t seed) {
  EvalReport r;
  r.auc = auc(predictions.scores, predictions.labels);
  r.acc = acc(predictions.scores, predictions.labels);
  r.n_predictions = predictions.size();
  r.protocol = std::move(protocol);
  r.model = std::move(model);
  r.seed = seed;
  return r;
}

std::string to_json_line(const EvalReport& r) {
  nlohmann::json j;
  j["auc"] = r.auc;
  j["acc"] = r.acc;
  j["n_predictions"] = r.n_predictions;
  j["protocol"] = r.protocol;
  j["model"] = r.model;
  j["seed"] = r.seed;
  return j.dump();
}

void append_json_line(const std::filesystem::path& path, const std::string& line) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line << '\n';
}

double bayes_ceiling_auc(const Dataset& data, const std::vector<std::vector<double>>& true_p) {
  if (data.size() != true_p.size()) {
    throw ValidationError("true_p covers " + std::to_string(true_p.size()) + " students, data " +
                          std::to_string(data.size()));
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (data[s].records.size() != true_p[s].size()) {
      throw ValidationError("true_p length mismatch for student " + data[s].student_id);
    }
    for (std::size_t i = 0; i < true_p[s].size(); ++i) {
      scores.push_back(true_p[s][i]);
      labels.push_back(data[s].records[i].response);
    }
  }
  return auc(scores, labels);
}

std::string to_string(ModelKind kind) { return kind == ModelKind::kDkt ? "dkt" : "lkt"; }

ModelKind parse_model_kind(const std::string& text) {
  if (text == "lkt") return ModelKind::kLkt;
  if (text == "dkt") return ModelKind::kDkt;
  throw ValidationError("model must be lkt or dkt, got '" + text + "'");
}

std::pair<std::vector<std::string>, std::vector<std::string>> holdout_split(
    std::vector<std::string> ids, double fraction, std::uint64_t seed) {
  auto order = seeded_order(std::move(ids), seed);
  const std::size_t n = order.size();
  if (n < 2) throw ValidationError("holdout split needs at least 2 students");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ValidationError("holdout fraction must be in (0, 1)");
  }
  const auto held = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::string> held_out(order.begin(), order.begin() + static_cast<long>(held));
  std::vector<std::string> kept(order.begin() + static_cast<long>(held), order.end());
  return {std::move(kept), std::move(held_out)};
}

// ---- fitting ----------------------------------------------------------------------

template <typename T>
LktFit<T> fit_lkt(const Dataset& train_data, const Dataset& val_data, const Vocabulary& vocab,
                  const ExperimentConfig& config, const LktModel<T>* init,
                  const EpochCallback& on_epoch) {
  LktConfig lc = init ? init->config() : config.lkt;
  if (!init) lc.vocab_size = vocab.size();
  if (lc.vocab_size != vocab.size()) {
    throw ValidationError("model vocabulary has " + std::to_string(lc.vocab_size) +
                          " tokens but the vocabulary file has " + std::to_string(vocab.size()));
  }
  LktFit<T> fit{init ? *init : LktModel<T>(lc, derive_seed(config.train.seed, {0x1u})), {}};
  fit.model.mutable_config().head_type = HeadType::kResponse;
  const std::size_t max_len = fit.model.config().max_len;
  LktTrainingTask<T> task(fit.model, lkt_windows(train_data, vocab, max_len),
                          lkt_windows(val_data, vocab, max_len), config.train.mask_rate);
  fit.result = train(task, config.train, on_epoch);
  return fit;
}

template <typename T>
DktFit<T> fit_dkt(const Dataset& train_data, const Dataset& val_data,
                  const ExperimentConfig& config, const EpochCallback& on_epoch) {
  auto questions = QuestionIndex::build(train_data);
  if (questions.size() == 0) throw ValidationError("DKT training: no questions in training set");
  DktFit<T> fit{DktModel<T>({questions.size(), config.dkt_hidden},
                            derive_seed(config.dkt_train.seed, {0x2u})),
                questions,
                {}};
  DktTrainingTask<T> task(fit.model, dkt_examples(train_data, questions, UnseenQuestion::kError),
                          dkt_examples(val_data, questions, UnseenQuestion::kSentinel));
  fit.result = train(task, config.dkt_train, on_epoch);
  return fit;
}

// ---- protocols ----------------------------------------------------------------------

CvSummary summarize_folds(std::vector<EvalReport> folds) {
  CvSummary s;
  std::vector<double> aucs, accs;
  for (const auto& r : folds) {
    aucs.push_back(r.auc);
    accs.push_back(r.acc);
  }
  s.auc = mean_and_std(aucs);
  s.acc = mean_and_std(accs);
  s.folds = std::move(folds);
  return s;
}

namespace {

template <typename T>
EvalReport fit_and_score(const Dataset& train_data, const Dataset& val_data,
                         const Dataset& test_data, const Vocabulary& vocab,
                         const ExperimentConfig& config, const std::string& protocol,
                         std::uint64_t seed) {
  if (config.model == ModelKind::kLkt) {
    auto fit = fit_lkt<T>(train_data, val_data, vocab, config);
    const auto windows = lkt_windows(test_data, vocab, fit.model.config().max_len);
    return make_report(predict_lkt(fit.model, std::span<const LktSequence>(windows),
                                   config.train.mask_rate),
                       protocol, "lkt", seed);
  }
  auto fit = fit_dkt<T>(train_data, val_data, config);
  const auto examples = dkt_examples(test_data, fit.questions, UnseenQuestion::kSentinel);
  return make_report(predict_dkt(fit.model, std::span<const DktExample>(examples)), protocol,
                     "dkt", seed);
}

}  // namespace

template <typename T>
CvSummary run_cv(const Dataset& data, const Vocabulary& vocab, const ExperimentConfig& config,
                 std::size_t k, std::uint64_t seed) {
  const auto split = split_folds(student_ids(data), k, seed);
  std::vector<EvalReport> reports;
  for (std::size_t f = 0; f < k; ++f) {
    try {
      auto [train_ids, val_ids] =
          holdout_split(split.all_except(f), config.val_fraction, derive_seed(seed, {0x7u, f}));
      const auto test_ids = split.fold(f);
      reports.push_back(fit_and_score<T>(select_students(data, train_ids),
                                         select_students(data, val_ids),
                                         select_students(data, test_ids), vocab, config,
                                         "fold=" + std::to_string(f), seed));
    } catch (const ValidationError& e) {
      throw ValidationError("fold " + std::to_string(f) + ": " + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  return summarize_folds(std::move(reports));
}

ColdStartSplit coldstart_split(const Dataset& target, double test_fraction, double val_fraction,
                               std::uint64_t seed) {
  if (!(test_fraction > 0.0) || !(val_fraction > 0.0) || test_fraction + val_fraction >= 1.0) {
    throw ValidationError("cold-start test and validation fractions must be positive and sum < 1");
  }
  const auto order = seeded_order(student_ids(target), seed);
  const double n = static_cast<double>(order.size());
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(test_fraction * n)));
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * n)));
  if (n_test + n_val >= order.size()) {
    throw ValidationError("cold-start split: too few students (" + std::to_string(order.size()) +
                          ")");
  }
  ColdStartSplit s;
  s.test.assign(order.begin(), order.begin() + static_cast<long>(n_test));
  s.val.assign(order.begin() + static_cast<long>(n_test),
               order.begin() + static_cast<long>(n_test + n_val));
  s.pool.assign(order.begin() + static_cast<long>(n_test + n_val), order.end());
  return s;
}

std::vector<std::string> fraction_subset(const ColdStartSplit& split, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ValidationError("fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  const auto n = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(split.pool.size()) + 1e-9));
  if (n < 1) {
    throw ValidationError("fraction " + std::to_string(fraction) + " of " +
                          std::to_string(split.pool.size()) + " students selects no student");
  }
  return {split.pool.begin(), split.pool.begin() + static_cast<long>(n)};
}

namespace {

std::string fraction_tag(double f) {
  std::ostringstream os;
  os << "fraction=" << f;
  return os.str();
}

}  // namespace

template <typename T>
std::vector<EvalReport> coldstart_fraction_sweep(const LktModel<T>& pretrained,
                                                 const Dataset& target, const Vocabulary& vocab,
                                                 std::span<const double> fractions,
                                                 const ExperimentConfig& config,
                                                 const ColdStartOptions& options,
                                                 std::uint64_t seed) {
  const auto split = coldstart_split(target, options.test_fraction, options.val_fraction, seed);
  for (double f : fractions) fraction_subset(split, f);  // validate all before any work

  const auto val = select_students(target, split.val);
  const auto test = select_students(target, split.test);
  const auto test_windows = lkt_windows(test, vocab, pretrained.config().max_len);
  ExperimentConfig tuned = config;
  tuned.train.evaluate_initial = true;

  std::vector<EvalReport> reports;
  for (double f : fractions) {
    const auto subset = select_students(target, fraction_subset(split, f));
    auto lkt = fit_lkt<T>(subset, val, vocab, tuned, &pretrained);
    reports.push_back(make_report(
        predict_lkt(lkt.model, std::span<const LktSequence>(test_windows), config.train.mask_rate),
        fraction_tag(f), "lkt", seed));
    if (options.include_dkt) {
      auto dkt = fit_dkt<T>(subset, val, config);
      const auto examples = dkt_examples(test, dkt.questions, UnseenQuestion::kSentinel);
      reports.push_back(make_report(predict_dkt(dkt.model, std::span<const DktExample>(examples)),
                                    fraction_tag(f), "dkt", seed));
    }
  }
  return reports;
}

namespace {

void check_buckets(std::span<const std::size_t> buckets) {
  if (buckets.empty()) throw ValidationError("seq_length_buckets: no buckets");
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (buckets[i] == 0) throw ValidationError("seq_length_buckets: bucket lengths must be >= 1");
    if (i > 0 && buckets[i] <= buckets[i - 1]) {
      throw ValidationError("seq_length_buckets: buckets must be strictly ascending");
    }
  }
}

}  // namespace

template <typename T>
std::vector<EvalReport> seq_length_buckets(const LktModel<T>& model, const Dataset& data,
                                           const Vocabulary& vocab,
                                           std::span<const std::size_t> buckets,
                                           std::uint64_t seed) {
  check_buckets(buckets);
  std::vector<EvalReport> reports;
  for (auto len : buckets) {
    Predictions preds;
    for (const auto& s : data) {
      if (s.records.size() < len) continue;
      const auto seq = format_lkt_sequence(std::span(s.records).first(len), vocab);
      const auto window = window_sequence(seq, model.config().max_len).back();
      const std::size_t target[] = {window.interaction_count() - 1};
      const auto ex = mask_interactions(window, target);
      preds.scores.push_back(predict_example(model, ex).front());
      preds.labels.push_back(ex.labels.front());
    }
    if (preds.size() == 0) {
      throw ValidationError("seq_length_buckets: no student has " + std::to_string(len) +
                            " interactions");
    }
    reports.push_back(make_report(preds, "seq_len=" + std::to_string(len), "lkt", seed));
  }
  return reports;
}

template <typename T>
std::vector<EvalReport> seq_length_buckets(const DktModel<T>& model, const QuestionIndex& index,
                                           const Dataset& data,
                                           std::span<const std::size_t> buckets,
                                           std::uint64_t seed) {
  check_buckets(buckets);
  std::vector<EvalReport> reports;
  for (auto len : buckets) {
    Predictions preds;
    for (const auto& s : data) {
      if (s.records.size() < len) continue;
      const auto ex =
          encode_dkt(std::span(s.records).first(len), index, UnseenQuestion::kSentinel);
      preds.scores.push_back(dkt_predict_targets(model, ex).back());
      preds.labels.push_back(ex.responses.back());
    }
    if (preds.size() == 0) {
      throw ValidationError("seq_length_buckets: no student has " + std::to_string(len) +
                            " interactions");
    }
    reports.push_back(make_report(preds, "seq_len=" + std::to_string(len), "dkt", seed));
  }
  return reports;
}

template <typename T>
std::pair<EvalReport, EvalReport> zero_shot_eval(const LktModel<T>& lkt, const Vocabulary& vocab,
                                                 const DktModel<T>& dkt,
                                                 const QuestionIndex& dkt_questions,
                                                 const Dataset& target, double mask_rate,
                                                 std::uint64_t seed) {
  const auto windows = lkt_windows(target, vocab, lkt.config().max_len);
  auto lkt_report = make_report(
      predict_lkt(lkt, std::span<const LktSequence>(windows), mask_rate), "zero_shot", "lkt", seed);
  const auto examples = dkt_examples(target, dkt_questions, UnseenQuestion::kSentinel);
  auto dkt_report = make_report(predict_dkt(dkt, std::span<const DktExample>(examples)),
                                "zero_shot", "dkt", seed);
  return {std::move(lkt_report), std::move(dkt_report)};
}

#define LKT_INSTANTIATE(T)                                                                     \
  template Predictions predict_lkt(const LktModel<T>&, std::span<const LktSequence>, double);  \
  template Predictions predict_dkt(const DktModel<T>&, std::span<const DktExample>);           \
  template LktFit<T> fit_lkt(const Dataset&, const Dataset&, const Vocabulary&,                \
                             const ExperimentConfig&, const LktModel<T>*,                      \
                             const EpochCallback&);                                            \
  template DktFit<T> fit_dkt(const Dataset&, const Dataset&, const ExperimentConfig&,          \
                             const EpochCallback&);                                            \
  template CvSummary run_cv<T>(const Dataset&, const Vocabulary&, const ExperimentConfig&,     \
                               std::size_t, std::uint64_t);                                    \
  template std::vector<EvalReport> coldstart_fraction_sweep(                                   \
      const LktModel<T>&, const Dataset&, const Vocabulary&, std::span<const double>,          \
      const ExperimentConfig&, const ColdStartOptions&, std::uint64_t);                        \
  template std::vector<EvalReport> seq_length_buckets(                                         \
      const LktModel<T>&, const Dataset&, const Vocabulary&, std::span<const std::size_t>,     \
      std::uint64_t);                                                                          \
  template std::vector<EvalReport> seq_length_buckets(const DktModel<T>&,                      \
                                                      const QuestionIndex&, const Dataset&,    \
                                                      std::span<const std::size_t>,            \
                                                      std::uint64_t);                          \
  template std::pair<EvalReport, EvalReport> zero_shot_eval(                                   \
      const LktModel<T>&, const Vocabulary&, const DktModel<T>&, const QuestionIndex&,         \
      const Dataset&, double, std::uint64_t);

LKT_INSTANTIATE(float)
LKT_INSTANTIATE(double)

#undef LKT_INSTANTIATE

}  // namespace lkt
