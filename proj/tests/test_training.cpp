// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "lkt/errors.hpp"
#include "lkt/evaluation.hpp"
#include "lkt/training.hpp"

using namespace lkt;

namespace {

/// One scalar parameter; validation losses come from a script indexed by
/// epoch. The parameter moves every step so snapshots are observable.
class ScriptedTask final : public TrainingTask<double> {
 public:
  ScriptedTask(std::vector<double> val_losses, std::size_t examples = 4)
      : val_(std::move(val_losses)), examples_(examples) {
    params_.add("w", Tensor<double>({1}, 0.0));
  }

  ParameterSet<double>& parameters() override { return params_; }
  std::size_t num_examples() const override { return examples_; }
  void prepare_epoch(std::size_t epoch, std::uint64_t) override { epoch_ = epoch; }
  std::size_t loss_terms(std::size_t) const override { return 1; }
  double accumulate(std::span<const std::size_t> examples, double denominator, Rng&) override {
    params_[0].grad[0] += static_cast<double>(examples.size()) / denominator;
    return train_loss_nan_at == epoch_ ? std::numeric_limits<double>::quiet_NaN()
                                       : static_cast<double>(examples.size());
  }
  ValidationResult validate() override {
    values.push_back(params_[0].value[0]);
    const std::size_t i = std::min(calls_++, val_.size() - 1);
    return {val_[i], 0.5 + 0.01 * static_cast<double>(i)};
  }

  std::vector<double> values;  // parameter value at each validation
  std::size_t train_loss_nan_at = 0;

 private:
  ParameterSet<double> params_;
  std::vector<double> val_;
  std::size_t examples_;
  std::size_t epoch_ = 0;
  std::size_t calls_ = 0;
};

TrainConfig quick_config() {
  TrainConfig c;
  c.batch_size = 2;
  c.micro_batch_size = 2;
  c.peak_lr = 0.1;
  c.warmup_steps = 0;
  return c;
}

}  // namespace

TEST_CASE("adam_step: hand-computed first step and zero gradients") {
  std::vector<Tensor<double>> p = {Tensor<double>({1}, 2.0)};
  std::vector<Tensor<double>> g = {Tensor<double>({1}, 1.0)};
  AdamState<double> s;
  adam_step(std::span<Tensor<double>>(p), std::span<const Tensor<double>>(g), s, 0.01);
  // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
  CHECK(p[0][0] == doctest::Approx(2.0 - 0.01 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(s.step == 1);

  std::vector<Tensor<double>> q = {Tensor<double>({2, 2}, 0.5)};
  std::vector<Tensor<double>> zero = {Tensor<double>({2, 2}, 0.0)};
  AdamState<double> s2;
  adam_step(std::span<Tensor<double>>(q), std::span<const Tensor<double>>(zero), s2, 0.1);
  for (auto v : q[0].data()) CHECK(v == 0.5);

  std::vector<Tensor<double>> bad = {Tensor<double>({3}, 0.0)};
  CHECK_THROWS_AS(
      adam_step(std::span<Tensor<double>>(q), std::span<const Tensor<double>>(bad), s2, 0.1),
      DimensionError);
}

TEST_CASE("adam_step matches an independent reference over several steps") {
  const std::vector<double> grads = {0.3, -1.2, 0.05, 2.0, -0.7};
  std::vector<Tensor<double>> p = {Tensor<double>({1}, 1.0)};
  AdamState<double> s;
  double theta = 1.0, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double gr = grads[t - 1];
    std::vector<Tensor<double>> g = {Tensor<double>({1}, gr)};
    const double lr = 0.01 * static_cast<double>(t);
    adam_step(std::span<Tensor<double>>(p), std::span<const Tensor<double>>(g), s, lr);
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    theta -= lr * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p[0][0] == doctest::Approx(theta).epsilon(1e-12));
  }
}

TEST_CASE("lr_at: warmup then linear decay") {
  CHECK(lr_at(0, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_at(50, 1e-3, 100, 1000) == doctest::Approx(5e-4));
  CHECK(lr_at(100, 1e-3, 100, 1000) == doctest::Approx(1e-3));
  CHECK(lr_at(550, 1e-3, 100, 1000) == doctest::Approx(5e-4));
  CHECK(lr_at(1000, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_at(2000, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_at(0, 1e-3, 0, 10) == doctest::Approx(1e-3));
  // Continuity around the peak.
  CHECK(std::abs(lr_at(99, 1.0, 100, 1000) - lr_at(101, 1.0, 100, 1000)) < 0.02);
}

TEST_CASE("TrainConfig validation and precision names") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.max_epochs == 200);
  CHECK(c.patience == 10);
  c.micro_batch_size = 5;
  c.batch_size = 8;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.micro_batch_size = 64;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(parse_precision("f64") == Precision::kF64);
  CHECK(parse_precision("32") == Precision::kF32);
  CHECK(to_string(Precision::kF64) == "f64");
  CHECK_THROWS_AS(parse_precision("f16"), ValidationError);
}

TEST_CASE("early stopping: patience 1 with strictly worsening validation loss") {
  ScriptedTask task({1.0, 2.0, 3.0, 4.0});
  auto c = quick_config();
  c.patience = 1;
  auto r = train<double>(task, c);
  CHECK(r.history.size() == 2);
  CHECK(r.stopped_early);
  CHECK(r.best_epoch == 1);
  CHECK(task.parameters()[0].value[0] == task.values[0]);
}

TEST_CASE("early stopping: ten non-improving epochs after the minimum") {
  std::vector<double> val;
  for (int e = 0; e < 15; ++e) val.push_back(1.0 - 0.01 * e);  // best at epoch 15
  for (int e = 0; e < 30; ++e) val.push_back(0.9 + 0.001 * e);
  ScriptedTask task(val);
  auto r = train<double>(task, quick_config());
  CHECK(r.best_epoch == 15);
  CHECK(r.history.size() == 25);
  CHECK(r.stopped_early);
  CHECK(task.parameters()[0].value[0] == task.values[14]);
  for (const auto& h : r.history) CHECK(r.best_val_loss <= h.val_loss);
  CHECK(r.best_val_auc == doctest::Approx(0.5 + 0.14));
  // A tie does not count as an improvement.
  ScriptedTask flat({1.0, 1.0, 1.0, 1.0});
  auto c = quick_config();
  c.patience = 3;
  auto rf = train<double>(flat, c);
  CHECK(rf.best_epoch == 1);
  CHECK(rf.history.size() == 4);
}

TEST_CASE("early stopping: monotone improvement runs to the 200-epoch cap") {
  std::vector<double> val;
  for (int e = 0; e < 200; ++e) val.push_back(10.0 - 0.01 * e);
  ScriptedTask task(val, 2);
  auto r = train<double>(task, quick_config());
  CHECK(r.history.size() == 200);
  CHECK_FALSE(r.stopped_early);
  CHECK(r.best_epoch == 200);
  CHECK(r.steps == 200);
  CHECK(r.history.back().lr == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("evaluate_initial keeps the starting weights when training never helps") {
  ScriptedTask task({0.5, 0.9, 0.9, 0.9, 0.9});
  auto c = quick_config();
  c.patience = 2;
  c.evaluate_initial = true;
  auto r = train<double>(task, c);
  CHECK(r.best_epoch == 0);
  CHECK(r.best_val_loss == 0.5);
  CHECK(r.history.size() == 2);
  CHECK(task.parameters()[0].value[0] == 0.0);
}

TEST_CASE("divergence restores the best weights and reports the last finite epoch") {
  ScriptedTask task({1.0, 0.8, 0.9, 0.7});
  task.train_loss_nan_at = 3;
  try {
    train<double>(task, quick_config());
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.epoch() == 3);
    CHECK(e.last_finite_epoch() == 2);
    CHECK(e.partial().history.size() == 3);
    CHECK(e.partial().best_epoch == 2);
    CHECK(task.parameters()[0].value[0] == task.values[1]);
  }
}

TEST_CASE("epoch records serialise as JSON lines") {
  EpochRecord r{3, 0.5, 0.25, std::numeric_limits<double>::quiet_NaN(), 1e-3};
  const auto line = to_json_line(r);
  CHECK(line.find("\"epoch\":3") != std::string::npos);
  CHECK(line.find("\"val_auc\":null") != std::string::npos);
  CHECK(line.find("\"train_loss\":0.5") != std::string::npos);
  CHECK(line.find('\n') == std::string::npos);
}

namespace {

struct SmallData {
  Dataset train, val;
  Vocabulary vocab;
};

SmallData small_data() {
  SyntheticParams p;
  p.num_students = 12;
  p.num_questions = 6;
  p.num_concepts = 2;
  p.min_interactions = 4;
  p.max_interactions = 6;
  p.seed = 4;
  auto syn = generate_synthetic(p);
  auto ids = student_ids(syn.data);
  SmallData d;
  d.train = select_students(syn.data, std::vector<std::string>(ids.begin(), ids.begin() + 8));
  d.val = select_students(syn.data, std::vector<std::string>(ids.begin() + 8, ids.end()));
  d.vocab = build_vocab(text_corpus(syn.data), 1, 1000);
  return d;
}

LktConfig small_lkt(const Vocabulary& vocab) {
  LktConfig c;
  c.vocab_size = vocab.size();
  c.d_model = 8;
  c.num_heads = 2;
  c.num_layers = 1;
  c.d_ff = 16;
  c.max_len = 64;
  c.dropout_p = 0.0;
  return c;
}

}  // namespace

TEST_CASE("gradient accumulation: micro 2 of batch 4 equals one micro-batch of 4") {
  auto d = small_data();
  auto windows = lkt_windows(d.train, d.vocab, 64);
  auto val = lkt_windows(d.val, d.vocab, 64);
  auto run = [&](std::size_t micro) {
    LktModel<double> m(small_lkt(d.vocab), 9);
    LktTrainingTask<double> task(m, windows, val, 0.3);
    TrainConfig c;
    c.max_epochs = 3;
    c.batch_size = 4;
    c.micro_batch_size = micro;
    c.peak_lr = 1e-2;
    c.warmup_steps = 2;
    c.seed = 5;
    train<double>(task, c);
    return m.to_checkpoint();
  };
  auto a = run(4), b = run(2), one = run(1);
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& ta = a.tensors[i].values;
    for (std::size_t j = 0; j < ta.size(); ++j) {
      REQUIRE(std::abs(ta[j] - b.tensors[i].values[j]) <= 1e-5);
      REQUIRE(std::abs(ta[j] - one.tensors[i].values[j]) <= 1e-5);
    }
  }

  DktExample e1, e2;
  auto qi = QuestionIndex::build(d.train);
  auto dtrain = dkt_examples(d.train, qi, UnseenQuestion::kError);
  auto dval = dkt_examples(d.val, qi, UnseenQuestion::kSentinel);
  auto run_dkt = [&](std::size_t micro) {
    DktModel<double> m({qi.size(), 6}, 3);
    DktTrainingTask<double> task(m, dtrain, dval);
    TrainConfig c;
    c.max_epochs = 3;
    c.batch_size = 4;
    c.micro_batch_size = micro;
    c.peak_lr = 1e-2;
    c.warmup_steps = 2;
    train<double>(task, c);
    return m.to_checkpoint(qi);
  };
  auto da = run_dkt(4), db = run_dkt(2);
  for (std::size_t i = 0; i < da.tensors.size(); ++i) {
    for (std::size_t j = 0; j < da.tensors[i].values.size(); ++j) {
      REQUIRE(std::abs(da.tensors[i].values[j] - db.tensors[i].values[j]) <= 1e-5);
    }
  }
}

TEST_CASE("64-bit training is bit-reproducible for a fixed seed") {
  auto d = small_data();
  auto windows = lkt_windows(d.train, d.vocab, 64);
  auto val = lkt_windows(d.val, d.vocab, 64);
  auto run = [&](std::uint64_t seed) {
    auto cfg = small_lkt(d.vocab);
    cfg.dropout_p = 0.1;
    LktModel<double> m(cfg, 2);
    LktTrainingTask<double> task(m, windows, val, 0.15);
    TrainConfig c;
    c.max_epochs = 4;
    c.batch_size = 4;
    c.micro_batch_size = 2;
    c.peak_lr = 5e-3;
    c.warmup_steps = 2;
    c.seed = seed;
    std::vector<std::string> lines;
    train<double>(task, c, [&](const EpochRecord& r) { lines.push_back(to_json_line(r)); });
    return std::make_pair(lines, serialize_checkpoint(m.to_checkpoint()));
  };
  auto a = run(7), b = run(7), other = run(8);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != other.first);
}

TEST_CASE("LKT training task rejects the MLM head") {
  auto d = small_data();
  auto cfg = small_lkt(d.vocab);
  cfg.head_type = HeadType::kMlm;
  LktModel<double> m(cfg, 1);
  CHECK_THROWS_AS(LktTrainingTask<double>(m, lkt_windows(d.train, d.vocab, 64),
                                          lkt_windows(d.val, d.vocab, 64), 0.15),
                  ValidationError);
}

TEST_CASE("MLM pretraining lowers the validation loss") {
  auto d = small_data();
  std::vector<std::vector<TokenId>> train_seqs, val_seqs;
  for (const auto& w : lkt_windows(d.train, d.vocab, 64)) train_seqs.push_back(w.token_ids);
  for (const auto& w : lkt_windows(d.val, d.vocab, 64)) val_seqs.push_back(w.token_ids);
  auto cfg = small_lkt(d.vocab);
  cfg.head_type = HeadType::kMlm;
  LktModel<double> m(cfg, 3);
  MlmTrainingTask<double> task(m, train_seqs, val_seqs, 0.15);
  const double before = task.validate().loss;
  CHECK(before == doctest::Approx(std::log(static_cast<double>(cfg.vocab_size))).epsilon(0.05));
  TrainConfig c;
  c.max_epochs = 15;
  c.batch_size = c.micro_batch_size = 4;
  c.peak_lr = 1e-2;
  c.warmup_steps = 2;
  auto r = train<double>(task, c);
  CHECK(r.best_val_loss < 0.8 * before);
  CHECK(std::isnan(r.best_val_auc));

  LktModel<double> wrong(small_lkt(d.vocab), 3);
  CHECK_THROWS_AS(MlmTrainingTask<double>(wrong, train_seqs, val_seqs, 0.15), ValidationError);
}
