// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "lkt/errors.hpp"
#include "lkt/evaluation.hpp"
#include "lkt/interpret.hpp"

using namespace lkt;

namespace {

struct Fixture {
  SyntheticData syn;
  Vocabulary vocab;
  std::vector<LktSequence> windows;
  LktConfig config;

  Fixture() {
    SyntheticParams p;
    p.num_students = 16;
    p.num_questions = 6;
    p.num_concepts = 2;
    p.min_interactions = 5;
    p.max_interactions = 8;
    p.seed = 21;
    syn = generate_synthetic(p);
    vocab = build_vocab(text_corpus(syn.data), 1, 1000);
    windows = lkt_windows(syn.data, vocab, 128);
    config.vocab_size = vocab.size();
    config.d_model = 8;
    config.num_heads = 2;
    config.num_layers = 2;
    config.d_ff = 16;
    config.max_len = 128;
    config.dropout_p = 0.0;
  }

  LktExample example(std::size_t w, std::size_t target) const {
    const std::size_t targets[] = {target};
    return mask_interactions(windows[w], targets);
  }
};

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("a zero model attends uniformly and ignores padding") {
  Fixture f;
  LktModel<double> m(f.config, 1);
  for (auto& p : m.parameters()) {
    for (auto& v : p.value.data()) v = 0.0;
  }
  auto ex = f.example(0, 1);
  const std::size_t length = ex.token_ids.size();
  ex.token_ids.resize(length + 5, special::kPad);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    for (std::size_t head = 0; head < 2; ++head) {
      auto s = mean_attention(m, ex, layer, head, &f.vocab);
      REQUIRE(s.scores.size() == length + 5);
      CHECK(s.tokens.size() == length + 5);
      for (std::size_t j = 0; j < length; ++j) {
        CHECK(s.scores[j] == doctest::Approx(1.0 / static_cast<double>(length)));
      }
      for (std::size_t j = length; j < length + 5; ++j) CHECK(s.scores[j] == 0.0);
      CHECK(std::accumulate(s.scores.begin(), s.scores.end(), 0.0) == doctest::Approx(1.0));
    }
  }
  CHECK(mean_attention(m, ex, 0, 0, &f.vocab).tokens[0] == "[CLS]");
  CHECK_THROWS_AS(mean_attention(m, ex, 2, 0), ValidationError);
  CHECK_THROWS_AS(mean_attention(m, ex, 0, 2), ValidationError);
  const auto json = to_json(mean_attention(m, ex, 1, 1));
  CHECK(json.find("\"layer\":1") != std::string::npos);
  CHECK(json.find("\"scores\"") != std::string::npos);
}

TEST_CASE("LIME recovers a planted linear scorer") {
  const std::vector<TokenId> ids = {1, 10, 11, 12, 13, 14, 15, 2};
  const std::vector<std::size_t> positions = {1, 2, 3, 4, 5, 6};
  const std::vector<double> planted = {2.0, -1.0, 0.0, 0.5, -0.5, 1.5};
  auto scorer = [&](std::span<const TokenId> x) {
    double s = 0.3;
    for (std::size_t k = 0; k < positions.size(); ++k) {
      if (x[positions[k]] != special::kUnk) s += planted[k];
    }
    return s;
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    LimeOptions o;
    o.num_samples = 300;
    o.seed = seed;
    auto e = lime_explain(scorer, ids, positions, o);
    REQUIRE(e.weights.size() == 6);
    CHECK(e.positions == positions);
    for (std::size_t k = 0; k < 6; ++k) CHECK(e.weights[k] == doctest::Approx(planted[k]).epsilon(0.02));
    CHECK(e.weights[0] > 0);
    CHECK(e.weights[1] < 0);
    CHECK(std::abs(e.weights[2]) < 0.05);
    CHECK(spearman(e.weights, planted) >= 0.8);
    CHECK(e.r2 > 0.99);
    CHECK(e.kernel_width == doctest::Approx(0.75 * std::sqrt(6.0)));
  }
}

TEST_CASE("LIME on a constant scorer gives zero weights") {
  const std::vector<TokenId> ids = {1, 10, 11, 12, 2};
  const std::vector<std::size_t> positions = {1, 2, 3};
  auto e = lime_explain([](std::span<const TokenId>) { return 0.42; }, ids, positions,
                        LimeOptions{});
  for (double w : e.weights) CHECK(std::abs(w) < 1e-9);
  CHECK(e.intercept == doctest::Approx(0.42));
}

TEST_CASE("LIME on the model: deterministic, bounded and validated") {
  Fixture f;
  LktModel<double> m(f.config, 3);
  auto ex = f.example(0, 2);
  const std::size_t target = ex.mask_positions[0];
  LimeOptions o;
  o.num_samples = 200;
  o.seed = 5;
  auto a = lime_explain(m, ex, target, o, &f.vocab);
  auto b = lime_explain(m, ex, target, o, &f.vocab);
  CHECK(a.weights == b.weights);
  CHECK(a.intercept == b.intercept);
  CHECK_FALSE(a.weights.empty());
  for (auto pos : a.positions) {
    CHECK(pos != target);
    CHECK_FALSE(special::is_special(ex.token_ids[pos]));
  }
  CHECK(a.intercept > -1.0);
  CHECK(a.intercept < 2.0);
  const auto json = to_json(a);
  CHECK(json.find("\"weights\"") != std::string::npos);
  CHECK(json.find("\"r2\"") != std::string::npos);

  CHECK_THROWS_AS(lime_explain(m, ex, 0, o), ValidationError);  // [CLS], not [MASK]
  o.num_samples = 10;
  CHECK_THROWS_AS(lime_explain(m, ex, target, o), ValidationError);

  const std::vector<TokenId> ids = {1, 10, 2};
  const std::vector<std::size_t> none;
  CHECK_THROWS_AS(lime_explain([](std::span<const TokenId>) { return 0.0; }, ids, none,
                               LimeOptions{}),
                  ValidationError);
}

TEST_CASE("embedding export") {
  Fixture f;
  std::vector<LktExample> examples;
  for (std::size_t w = 0; w < 4; ++w) {
    auto ex = f.example(w, 1);
    ex.student_id = f.syn.data[w].student_id;
    examples.push_back(ex);
  }
  LktModel<double> untrained(f.config, 4);
  auto rows = export_embeddings(untrained, std::span<const LktExample>(examples),
                                PositionRule::kMaskPosition);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.vector.size() == f.config.d_model);
    CHECK(r.prediction > 0.0);
    CHECK(r.prediction < 1.0);
  }
  CHECK(rows[0].prediction == doctest::Approx(predict_example(untrained, examples[0])[0]));

  const auto csv = embeddings_csv(rows);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "student_id,e0,e1,e2,e3,e4,e5,e6,e7,prediction");
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    CHECK(std::count(line.begin(), line.end(), ',') == static_cast<long>(f.config.d_model + 1));
  }
  CHECK(n == 4);

  auto cls = export_embeddings(untrained, std::span<const LktExample>(examples), PositionRule::kCls);
  CHECK(cls[0].vector != rows[0].vector);
  CHECK(cls[0].prediction == rows[0].prediction);

  ExperimentConfig cfg;
  cfg.lkt = f.config;
  cfg.train.max_epochs = 2;
  auto fit = fit_lkt<double>(f.syn.data, f.syn.data, f.vocab, cfg, &untrained);
  auto trained = export_embeddings(fit.model, std::span<const LktExample>(examples),
                                   PositionRule::kMaskPosition);
  CHECK(trained[0].vector != rows[0].vector);

  auto no_mask = examples;
  no_mask[1].mask_positions.clear();
  CHECK_THROWS_AS(export_embeddings(untrained, std::span<const LktExample>(no_mask),
                                    PositionRule::kCls),
                  ValidationError);
  CHECK(parse_position_rule("cls") == PositionRule::kCls);
  CHECK(to_string(PositionRule::kMaskPosition) == "mask_position");
  CHECK_THROWS_AS(parse_position_rule("mean"), ValidationError);
}
