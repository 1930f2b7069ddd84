// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "lkt/errors.hpp"
#include "lkt/gradcheck.hpp"
#include "lkt/models.hpp"
#include "lkt/training.hpp"

using namespace lkt;

namespace {

LktConfig tiny_config() {
  LktConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.d_ff = 32;
  c.max_len = 16;
  c.dropout_p = 0.0;
  return c;
}

template <typename T>
void jitter(ParameterSet<T>& params, std::uint64_t seed, double sd) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& p : params) {
    for (std::size_t j = 0; j < p.value.size(); ++j) p.value[j] += static_cast<T>(nd(rng));
  }
}

const std::vector<TokenId> kIds = {1, 7, 8, 5, 9, 10, 3, 11, 7, 6, 2};

}  // namespace

TEST_CASE("init_parameters: truncated normal weights, zero biases, unit gains") {
  LktConfig c;
  c.vocab_size = 40;
  auto a = init_parameters<double>(c, 7);
  auto b = init_parameters<double>(c, 7);
  std::vector<double> weights;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& p = a.parameters()[i];
    CHECK(p.value.data().size() == b.parameters()[i].value.data().size());
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      REQUIRE(p.value[j] == b.parameters()[i].value[j]);
    }
    const bool gain = p.name.find("gain") != std::string::npos;
    const bool bias = p.value.rank() == 1 && !gain;
    for (auto v : p.value.data()) {
      if (gain) CHECK(v == 1.0);
      if (bias) CHECK(v == 0.0);
      if (!gain && !bias) {
        CHECK(std::abs(v) <= 0.04 + 1e-12);
        weights.push_back(v);
      }
    }
  }
  REQUIRE(weights.size() >= 10000);
  double mean = 0, sq = 0;
  for (auto v : weights) mean += v;
  mean /= weights.size();
  for (auto v : weights) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / (weights.size() - 1));
  CHECK(std::abs(sd - 0.02) <= 0.005);
  CHECK(std::abs(mean) < 1e-3);

  auto other = init_parameters<double>(c, 8);
  CHECK(other.parameters()[0].value[0] != a.parameters()[0].value[0]);
}

TEST_CASE("local init: sinusoidal positions and identity-biased query/key") {
  LktConfig c = tiny_config();
  c.init = InitScheme::kLocal;
  LktModel<double> m(c, 1);
  const auto& pe = m.parameters()[m.parameters().index_of("position_embedding")].value;
  CHECK(pe.at(0, 0) == doctest::Approx(0.0));
  CHECK(pe.at(0, 1) == doctest::Approx(0.1));
  CHECK(pe.at(3, 0) == doctest::Approx(0.1 * std::sin(3.0)));
  const auto& wq = m.parameters()[m.parameters().index_of("layer1.attn.wq")].value;
  const auto& wv = m.parameters()[m.parameters().index_of("layer1.attn.wv")].value;
  for (std::size_t i = 0; i < c.d_model; ++i) {
    CHECK(std::abs(wq.at(i, i) - 1.0) <= 0.04);
    CHECK(std::abs(wv.at(i, i)) <= 0.04);
  }
  CHECK(parse_init_scheme("local") == InitScheme::kLocal);
  CHECK(to_string(InitScheme::kNormal) == "normal");
  CHECK_THROWS_AS(parse_init_scheme("xavier"), ValidationError);
}

TEST_CASE("LktConfig validation") {
  LktConfig c = tiny_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config();
  c.max_len = 7;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config();
  c.dropout_p = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("LKT gradients match finite differences (2 layers, d=16, 2 heads)") {
  const auto start = std::chrono::steady_clock::now();
  LktModel<double> m(tiny_config(), 3);
  jitter(m.parameters(), 5, 0.3);
  // Padded to 13 positions; the last two are padding.
  std::vector<TokenId> ids = kIds;
  ids.push_back(0);
  ids.push_back(0);
  const std::vector<std::size_t> pos = {3, 7};
  const std::vector<double> y = {1, 0};
  const std::vector<std::size_t> mlm_pos = {2, 5};
  const std::vector<std::int32_t> mlm_targets = {8, 10};
  auto run = [&](bool grad) {
    Tape<double> tape(grad);
    LktGraph<double> g(m, tape, grad);
    auto enc = g.encode({ids, kIds.size()}, false, nullptr);
    auto loss = add(bce_loss(sigmoid(g.response_logits(enc.hidden, pos)), std::span<const double>(y)),
                    cross_entropy_rows(g.mlm_logits(enc.hidden, mlm_pos),
                                       std::span<const std::int32_t>(mlm_targets)));
    if (grad) {
      tape.backward(loss);
      g.accumulate_gradients(m);
    }
    return loss.value()[0];
  };
  auto res = check_gradients(m.parameters(), [&] { return run(false); }, [&] { run(true); });
  INFO("worst " << res.worst_parameter << "[" << res.worst_index << "] analytic " << res.analytic
                << " numeric " << res.numeric);
  CHECK(res.checked == m.parameters().num_values());
  CHECK(res.max_relative_error <= 1e-4);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(60));
}

TEST_CASE("DKT gradients match finite differences (4 steps)") {
  DktModel<double> m({3, 5}, 2);
  jitter(m.parameters(), 9, 0.3);
  DktExample ex;
  ex.question_indices = {0, 2, 1, 2};
  ex.responses = {1, 0, 1, 1};
  const auto inputs = ex.input_indices();
  const std::vector<std::size_t> rows = {1, 2, 3};
  const std::vector<std::size_t> cols = {2, 1, 2};
  const std::vector<double> y = {0, 1, 1};
  auto run = [&](bool grad) {
    Tape<double> tape(grad);
    DktGraph<double> g(m, tape, grad);
    auto loss = bce_loss(sigmoid(gather_elements(g.logits(inputs), rows, cols)),
                         std::span<const double>(y));
    if (grad) {
      tape.backward(loss);
      g.accumulate_gradients(m);
    }
    return loss.value()[0];
  };
  auto res = check_gradients(m.parameters(), [&] { return run(false); }, [&] { run(true); });
  INFO("worst " << res.worst_parameter << "[" << res.worst_index << "]");
  CHECK(res.max_relative_error <= 1e-4);
}

TEST_CASE("lkt_forward: attention rows, padding and determinism") {
  LktModel<double> m(tiny_config(), 4);
  jitter(m.parameters(), 6, 0.2);
  std::vector<TokenId> padded = kIds;
  padded.resize(14, 0);
  std::vector<TokenId> other_pad = padded;
  other_pad[12] = 9;  // contents beyond `length` are ignored
  Rng rng(1);
  std::vector<LktInput> batch = {{padded, kIds.size()}, {other_pad, kIds.size()}, {kIds, kIds.size()}};
  auto out = lkt_forward(m, std::span<const LktInput>(batch), false, rng);
  REQUIRE(out.sequences.size() == 3);
  for (const auto& layer : out.sequences[0].attention) {
    for (const auto& att : layer) {
      for (std::size_t i = 0; i < kIds.size(); ++i) {
        double row = 0;
        for (std::size_t j = 0; j < att.cols(); ++j) {
          CHECK(att.at(i, j) >= 0.0);
          if (j >= kIds.size()) CHECK(att.at(i, j) == 0.0);
          row += att.at(i, j);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
  for (std::size_t i = 0; i < kIds.size(); ++i) {
    CHECK(out.sequences[0].logits[i] == out.sequences[1].logits[i]);
    CHECK(out.sequences[0].logits[i] == doctest::Approx(out.sequences[2].logits[i]).epsilon(1e-12));
  }

  // Permuting the batch permutes the outputs.
  std::vector<LktInput> swapped = {batch[2], batch[0]};
  auto out2 = lkt_forward(m, std::span<const LktInput>(swapped), false, rng);
  for (std::size_t i = 0; i < kIds.size(); ++i) {
    CHECK(out2.sequences[1].logits[i] == out.sequences[0].logits[i]);
  }
}

TEST_CASE("lkt_forward: short sequences and length errors") {
  LktConfig c = tiny_config();
  LktModel<float> m(c, 1);
  Rng rng(0);
  std::vector<TokenId> two = {special::kCls, special::kEos};
  std::vector<LktInput> batch = {{two, 2}};
  auto out = lkt_forward(m, std::span<const LktInput>(batch), false, rng);
  CHECK(out.sequences[0].logits.shape() == Shape{2, 1});
  c.head_type = HeadType::kMlm;
  LktModel<float> mlm(c, 1);
  auto out_mlm = lkt_forward(mlm, std::span<const LktInput>(batch), false, rng);
  CHECK(out_mlm.sequences[0].logits.shape() == Shape{2, c.vocab_size});

  std::vector<TokenId> long_ids(c.max_len + 1, 7);
  std::vector<LktInput> too_long = {{long_ids, long_ids.size()}};
  CHECK_THROWS_AS(lkt_forward(m, std::span<const LktInput>(too_long), false, rng), ValidationError);
}

TEST_CASE("predict_masked_correctness") {
  LktModel<double> m(tiny_config(), 2);
  jitter(m.parameters(), 3, 0.2);
  auto& head = m.parameters()[m.parameters().index_of("response_head.weight")].value;
  Rng rng(0);
  std::vector<LktInput> batch = {{kIds, kIds.size()}};
  const std::vector<std::size_t> masks = {6};
  auto out = lkt_forward(m, std::span<const LktInput>(batch), false, rng);
  auto p = predict_masked_correctness(out.sequences[0], masks);
  REQUIRE(p.size() == 1);
  CHECK(p[0] > 0.0);
  CHECK(p[0] < 1.0);
  const std::vector<std::size_t> not_mask = {2};
  CHECK_THROWS(predict_masked_correctness(out.sequences[0], not_mask));

  for (auto& v : head.data()) v = 0.0;
  m.parameters()[m.parameters().index_of("response_head.bias")].value[0] = 0.0;
  out = lkt_forward(m, std::span<const LktInput>(batch), false, rng);
  CHECK(predict_masked_correctness(out.sequences[0], masks)[0] == 0.5);

  LktExample ex;
  ex.token_ids = kIds;
  ex.mask_positions = {6};
  CHECK(predict_example(m, ex)[0] == 0.5);
}

TEST_CASE("mlm loss: uniform logits give ln V, and training lowers it") {
  LktConfig c = tiny_config();
  c.vocab_size = 20;
  c.head_type = HeadType::kMlm;
  LktModel<double> m(c, 1);
  for (auto& v : m.parameters()[m.parameters().index_of("mlm_head.weight")].value.data()) v = 0.0;
  Rng rng(0);
  auto ex = mask_tokens_mlm(kIds, c.vocab_size, 0.5, 3);
  std::vector<MlmExample> one = {ex};
  CHECK(mlm_forward_loss(m, std::span<const MlmExample>(one), false, rng, false) ==
        doctest::Approx(std::log(20.0)));
  std::vector<MlmExample> none = {MlmExample{kIds, {}, {}}};
  CHECK_THROWS(mlm_forward_loss(m, std::span<const MlmExample>(none), false, rng, false));

  // 100 sentences over a 13-word vocabulary with fixed word order patterns.
  LktModel<float> model(c, 2);
  std::vector<std::vector<TokenId>> corpus;
  Rng gen(11);
  for (int s = 0; s < 100; ++s) {
    const TokenId subject = 7 + static_cast<TokenId>(gen() % 4);
    const TokenId verb = 11 + (subject - 7) % 2;
    const TokenId object = 13 + static_cast<TokenId>(gen() % 3);
    corpus.push_back({special::kCls, subject, verb, 16, object, 17 + (object - 13) % 3,
                      special::kEos});
  }
  auto batch_loss = [&](std::uint64_t seed, bool backward) {
    std::vector<MlmExample> batch;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      batch.push_back(mask_tokens_mlm(corpus[i], c.vocab_size, 0.15, derive_seed(seed, {i})));
    }
    Rng drop(seed);
    return mlm_forward_loss(model, std::span<const MlmExample>(batch), false, drop, backward);
  };
  const double initial = batch_loss(999, false);
  AdamState<float> state;
  for (std::uint64_t step = 0; step < 50; ++step) {
    model.parameters().zero_grad();
    batch_loss(step, true);
    adam_step(model.parameters(), state, 1e-2);
  }
  CHECK(batch_loss(999, false) <= 0.8 * initial);
}

TEST_CASE("DKT: causality, prior and sentinel inputs") {
  DktModel<double> m({4, 6}, 3);
  jitter(m.parameters(), 4, 0.3);
  DktExample a;
  a.question_indices = {0, 1, 2, 3};
  a.responses = {1, 0, 1, 0};
  DktExample b = a;
  b.responses[2] = 0;
  b.question_indices[2] = 1;
  auto pa = dkt_forward(m, a);
  auto pb = dkt_forward(m, b);
  CHECK(pa.shape() == Shape{4, 4});
  // Steps 0..2 only see inputs before step 2.
  for (std::size_t t = 0; t <= 2; ++t) {
    for (std::size_t q = 0; q < 4; ++q) CHECK(pa.at(t, q) == pb.at(t, q));
  }
  bool differs = false;
  for (std::size_t q = 0; q < 4; ++q) differs = differs || pa.at(3, q) != pb.at(3, q);
  CHECK(differs);

  DktExample c;
  c.question_indices = {3, 2, 1, 0};
  c.responses = {0, 0, 0, 1};
  auto pc = dkt_forward(m, c);
  for (std::size_t q = 0; q < 4; ++q) CHECK(pc.at(0, q) == pa.at(0, q));

  DktExample s;
  s.question_indices = {kUnknownQuestion, kUnknownQuestion, kUnknownQuestion};
  s.responses = {1, 0, 1};
  auto ps = dkt_forward(m, s);
  auto targets = dkt_predict_targets(m, s);
  DktExample s_flip = s;
  s_flip.responses = {0, 1, 0};
  auto ps_flip = dkt_forward(m, s_flip);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(targets[t] == m.prior());
    // Sentinel steps feed a zero input, so the responses there carry no signal.
    for (std::size_t q = 0; q < 4; ++q) CHECK(ps.at(t, q) == ps_flip.at(t, q));
  }
  DktExample empty;
  CHECK_THROWS(dkt_forward(m, empty));
}

TEST_CASE("checkpoints: save, load, save is byte-identical") {
  LktConfig c = tiny_config();
  c.init = InitScheme::kLocal;
  LktModel<float> m(c, 5);
  jitter(m.parameters(), 1, 0.1);
  const auto bytes = serialize_checkpoint(m.to_checkpoint());
  auto loaded = LktModel<float>::from_checkpoint(parse_checkpoint(bytes));
  CHECK(serialize_checkpoint(loaded.to_checkpoint()) == bytes);
  CHECK(loaded.config().d_model == c.d_model);
  CHECK(loaded.config().init == InitScheme::kLocal);

  LktModel<double> md(c, 5);
  jitter(md.parameters(), 2, 0.1);
  const auto dbytes = serialize_checkpoint(md.to_checkpoint());
  auto dloaded = LktModel<double>::from_checkpoint(parse_checkpoint(dbytes));
  CHECK(serialize_checkpoint(dloaded.to_checkpoint()) == dbytes);
  for (std::size_t i = 0; i < md.parameters().size(); ++i) {
    for (std::size_t j = 0; j < md.parameters()[i].value.size(); ++j) {
      REQUIRE(dloaded.parameters()[i].value[j] == md.parameters()[i].value[j]);
    }
  }

  DktModel<float> dkt({5, 4}, 1);
  auto q = QuestionIndex::from_ids({"a", "b", "c", "d", "e"});
  const auto kbytes = serialize_checkpoint(dkt.to_checkpoint(q));
  auto kloaded = DktModel<float>::from_checkpoint(parse_checkpoint(kbytes));
  CHECK(serialize_checkpoint(kloaded.to_checkpoint(q)) == kbytes);

  CHECK_THROWS_AS(DktModel<float>::from_checkpoint(parse_checkpoint(bytes)), ValidationError);
  CHECK_THROWS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)));
}
