// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "lkt/dataset.hpp"
#include "lkt/errors.hpp"
#include "lkt/random.hpp"

using namespace lkt;

namespace {

const std::string kHeader = std::string(kInteractionHeader) + "\n";

InteractionRecord record(std::string student, std::int64_t step, std::string q, std::string c,
                         std::string qtext, int r) {
  return {std::move(student), step, std::move(q), "c_" + c, std::move(qtext), std::move(c), r};
}

Vocabulary vocab_of(std::vector<std::string> corpus) { return build_vocab(corpus, 1, 1000); }

LktSequence synthetic_sequence(std::size_t interactions, std::uint64_t seed) {
  static const Vocabulary v = vocab_of({"sets what is a set"});
  Rng rng(seed);
  std::vector<InteractionRecord> recs;
  for (std::size_t i = 0; i < interactions; ++i) {
    recs.push_back(record("s", static_cast<std::int64_t>(i), "q", "sets", "what is a set",
                          static_cast<int>(rng() % 2)));
  }
  return format_lkt_sequence(recs, v);
}

}  // namespace

TEST_CASE("load_interactions groups and sorts") {
  auto d = parse_interactions(kHeader + "s1,2,q2,c1,\"what, is\",sets,1\ns1,1,q1,c1,what,sets,0\n");
  REQUIRE(d.size() == 1);
  REQUIRE(d[0].records.size() == 2);
  CHECK(d[0].records[0].step == 1);
  CHECK(d[0].records[1].step == 2);
  CHECK(d[0].records[1].question_text == "what, is");

  try {
    parse_interactions(kHeader + "s1,4,q1,c1,a,b,1\ns1,4,q2,c1,a,b,0\n");
    FAIL("expected duplicate error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("4") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_interactions(kHeader + "s1,1,q1,c1,a,b,2\n"), ValidationError);
  CHECK_THROWS_AS(parse_interactions(kHeader + "s1,1,,c1,a,b,1\n"), ValidationError);
  CHECK_THROWS_AS(parse_interactions(kHeader + "s1,1,q1\n"), ValidationError);
  CHECK_THROWS_AS(parse_interactions("wrong,header\n"), ValidationError);
}

TEST_CASE("CSV round trip") {
  SyntheticParams p;
  p.num_students = 5;
  p.num_questions = 6;
  p.num_concepts = 2;
  auto s = generate_synthetic(p);
  const auto text = write_interactions_csv(s.data);
  auto back = parse_interactions(text);
  CHECK(write_interactions_csv(back) == text);
}

TEST_CASE("format_lkt_sequence") {
  auto v = vocab_of({"sets what is a set"});
  std::vector<InteractionRecord> one = {record("s", 0, "q1", "sets", "what is a set", 1)};
  auto seq = format_lkt_sequence(one, v);
  CHECK(seq.token_ids == encode(v, "[CLS] sets what is a set [CORRECT] [EOS]"));
  CHECK(seq.response_positions == std::vector<std::size_t>{6});
  one[0].response = 0;
  CHECK(format_lkt_sequence(one, v).token_ids ==
        encode(v, "[CLS] sets what is a set [INCORRECT] [EOS]"));
  auto two = one;
  two.push_back(record("s", 1, "q2", "sets", "a set", 1));
  auto s2 = format_lkt_sequence(two, v);
  REQUIRE(s2.response_positions.size() == 2);
  CHECK(s2.response_positions[0] < s2.response_positions[1]);
  CHECK_THROWS(format_lkt_sequence(std::span<const InteractionRecord>(), v));
}

TEST_CASE("mask_responses") {
  auto single = synthetic_sequence(1, 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto ex = mask_responses(single, 0.15, seed);
    CHECK(ex.mask_positions == single.response_positions);
  }
  auto seq = synthetic_sequence(25, 2);
  auto a = mask_responses(seq, 0.15, 77), b = mask_responses(seq, 0.15, 77);
  CHECK(a.mask_positions == b.mask_positions);
  for (std::size_t k = 0; k < a.mask_positions.size(); ++k) {
    CHECK(a.token_ids[a.mask_positions[k]] == special::kMask);
    CHECK(a.labels[k] == seq.responses[a.mask_interactions[k]]);
  }
  // non-response tokens untouched; response + mask tokens == interaction count
  std::size_t responses = 0;
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    const auto t = a.token_ids[i];
    if (special::is_response(t) || t == special::kMask) ++responses;
    if (t != special::kMask) CHECK(t == seq.token_ids[i]);
  }
  CHECK(responses == seq.interaction_count());
}

TEST_CASE("masking statistics match the forced-one binomial expectation") {
  const double rate = 0.15;
  std::size_t total = 0, masked = 0;
  double expected = 0.0;
  Rng lengths(5);
  for (std::uint64_t s = 0; total < 12000; ++s) {
    const std::size_t n = 5 + lengths() % 40;
    auto seq = synthetic_sequence(n, s);
    masked += mask_responses(seq, rate, derive_seed(9, {s})).mask_positions.size();
    total += n;
    expected += n * rate + std::pow(1.0 - rate, static_cast<double>(n));
  }
  const double observed = static_cast<double>(masked) / static_cast<double>(total);
  CHECK(observed >= 0.13);
  CHECK(observed <= 0.18);
  // within 4 binomial standard deviations of the corrected expectation
  const double sd = std::sqrt(rate * (1 - rate) / static_cast<double>(total));
  CHECK(std::abs(observed - expected / static_cast<double>(total)) < 4 * sd);
}

TEST_CASE("window_sequence") {
  auto short_seq = synthetic_sequence(3, 4);
  auto w = window_sequence(short_seq, 512);
  REQUIRE(w.size() == 1);
  CHECK(w[0].token_ids == short_seq.token_ids);
  CHECK(w[0].response_positions == short_seq.response_positions);

  // three interactions of exactly 200 tokens each
  std::string words;
  for (int i = 0; i < 198; ++i) words += "w ";
  auto v = vocab_of({"c w"});
  std::vector<InteractionRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(record("s", i, "q" + std::to_string(i), "c", words, i % 2));
  auto seq = format_lkt_sequence(recs, v);
  auto windows = window_sequence(seq, 512);
  REQUIRE(windows.size() == 2);
  CHECK(windows[0].interaction_count() == 1);
  CHECK(windows[1].interaction_count() == 2);
  CHECK(windows[1].question_ids.back() == "q2");
  for (const auto& win : windows) {
    CHECK(win.token_ids.front() == special::kCls);
    CHECK(win.token_ids.back() == special::kEos);
    CHECK(win.token_ids.size() <= 512);
  }

  std::string long_words;
  for (int i = 0; i < 598; ++i) long_words += "w ";
  std::vector<InteractionRecord> big = {record("s", 0, "huge_q", "c", long_words, 1)};
  try {
    window_sequence(format_lkt_sequence(big, v), 512);
    FAIL("expected error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("huge_q") != std::string::npos);
  }
}

TEST_CASE("encode_dkt") {
  auto index = QuestionIndex::from_ids({"a", "b", "c", "d"});
  std::vector<InteractionRecord> recs = {record("s", 0, "d", "x", "", 1),
                                         record("s", 1, "a", "x", "", 0)};
  auto ex = encode_dkt(recs, index);
  CHECK(ex.input_indices() == std::vector<std::int32_t>{7, 0});
  recs.push_back(record("s", 2, "zz", "x", "", 1));
  CHECK_THROWS_AS(encode_dkt(recs, index), ValidationError);
  auto z = encode_dkt(recs, index, UnseenQuestion::kSentinel);
  CHECK(z.question_indices.back() == kUnknownQuestion);
  CHECK(z.input_indices().back() == kUnknownQuestion);
}

TEST_CASE("split_folds") {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
    return v;
  };
  auto ten = split_folds(ids(10), 5, 1);
  for (std::size_t f = 0; f < 5; ++f) CHECK(ten.fold(f).size() == 2);
  auto eleven = split_folds(ids(11), 5, 1);
  std::multiset<std::size_t> sizes;
  std::set<std::string> all;
  for (std::size_t f = 0; f < 5; ++f) {
    sizes.insert(eleven.fold(f).size());
    for (auto& s : eleven.fold(f)) CHECK(all.insert(s).second);
  }
  CHECK(sizes == std::multiset<std::size_t>{2, 2, 2, 2, 3});
  CHECK(all.size() == 11);
  CHECK(split_folds(ids(11), 5, 1).assignment == eleven.assignment);
  CHECK_THROWS_AS(split_folds(ids(4), 5, 1), ValidationError);
}

TEST_CASE("seeded_order prefixes are nested") {
  std::vector<std::string> ids;
  for (int i = 0; i < 50; ++i) ids.push_back("s" + std::to_string(i));
  auto a = seeded_order(ids, 3);
  std::reverse(ids.begin(), ids.end());
  CHECK(seeded_order(ids, 3) == a);  // independent of input order
}

TEST_CASE("synthetic generator") {
  CHECK(irt_probability(0.3, 0.3, 1.7) == 0.5);
  SyntheticParams p;
  p.num_students = 20;
  p.seed = 4;
  auto a = generate_synthetic(p), b = generate_synthetic(p);
  CHECK(write_interactions_csv(a.data) == write_interactions_csv(b.data));
  CHECK(a.data.size() == 20);
  for (std::size_t s = 0; s < a.data.size(); ++s) {
    CHECK(a.true_p[s].size() == a.data[s].records.size());
    CHECK(a.data[s].records.size() >= p.min_interactions);
    CHECK(a.data[s].records.size() <= p.max_interactions);
  }
  // question text carries concept name and a difficulty keyword
  const auto& r = a.data[0].records[0];
  CHECK(r.question_text.find(r.concept_text) != std::string::npos);

  // empirical correctness converges to the IRT probability (2 sigma)
  Rng rng(8);
  std::bernoulli_distribution coin(irt_probability(0.4, -0.2, 1.3));
  const int n = 20000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += coin(rng);
  const double p_true = irt_probability(0.4, -0.2, 1.3);
  CHECK(std::abs(hits / double(n) - p_true) < 2 * std::sqrt(p_true * (1 - p_true) / n));

  SyntheticParams q = p;
  q.question_prefix = "r";
  auto other = generate_synthetic(q);
  std::set<std::string> qa, qb;
  for (auto& s : a.data) for (auto& rec : s.records) qa.insert(rec.question_id);
  for (auto& s : other.data) for (auto& rec : s.records) qb.insert(rec.question_id);
  for (auto& id : qb) CHECK(qa.count(id) == 0);
}
