// SPDX-License-Identifier: Apache-2.0
#include "lkt/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "lkt/errors.hpp"
#include "lkt/random.hpp"

namespace lkt {

// ---- CSV --------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started) {
          throw ValidationError("CSV parse error: stray quote on line " + std::to_string(line));
        }
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_row();
        ++line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw ValidationError("CSV parse error: unterminated quoted field");
  if (field_started || !row.empty()) end_row();
  return rows;
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::int64_t parse_int(const std::string& s, std::size_t row, const char* name) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ValidationError("row " + std::to_string(row) + ": field '" + name +
                          "' is not an integer: '" + s + "'");
  }
  return v;
}

}  // namespace

Dataset parse_interactions(std::string_view csv_text) {
  auto rows = parse_csv(csv_text);
  if (rows.empty()) throw ValidationError("interaction CSV is empty (missing header)");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (!header.empty() && static_cast<unsigned char>(header[0]) == 0xEF) header.erase(0, 3);
  if (header != kInteractionHeader) {
    throw ValidationError("interaction CSV header must be '" + std::string(kInteractionHeader) +
                          "', got '" + header + "'");
  }
  std::map<std::string, StudentHistory> by_student;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    const std::size_t row_no = r + 1;
    if (f.size() != 7) {
      throw ValidationError("CSV parse error: row " + std::to_string(row_no) + " has " +
                            std::to_string(f.size()) + " fields, expected 7");
    }
    static constexpr const char* kNames[] = {"student_id", "step", "question_id", "concept_id"};
    for (std::size_t i = 0; i < 4; ++i) {
      if (f[i].empty()) {
        throw ValidationError("row " + std::to_string(row_no) + ": missing required field '" +
                              kNames[i] + "'");
      }
    }
    if (f[6].empty()) {
      throw ValidationError("row " + std::to_string(row_no) + ": missing required field 'response'");
    }
    InteractionRecord rec;
    rec.student_id = f[0];
    rec.step = parse_int(f[1], row_no, "step");
    if (rec.step < 0) {
      throw ValidationError("row " + std::to_string(row_no) + ": step must be nonnegative");
    }
    rec.question_id = f[2];
    rec.concept_id = f[3];
    rec.question_text = f[4];
    rec.concept_text = f[5];
    if (f[6] != "0" && f[6] != "1") {
      throw ValidationError("row " + std::to_string(row_no) + ": response must be 0 or 1, got '" +
                            f[6] + "'");
    }
    rec.response = f[6] == "1" ? 1 : 0;
    auto& hist = by_student[rec.student_id];
    hist.student_id = rec.student_id;
    hist.records.push_back(std::move(rec));
  }
  Dataset out;
  out.reserve(by_student.size());
  for (auto& [id, hist] : by_student) {
    std::stable_sort(hist.records.begin(), hist.records.end(),
                     [](const auto& a, const auto& b) { return a.step < b.step; });
    for (std::size_t i = 1; i < hist.records.size(); ++i) {
      if (hist.records[i].step == hist.records[i - 1].step) {
        throw ValidationError("duplicate step " + std::to_string(hist.records[i].step) +
                              " for student '" + id + "'");
      }
    }
    out.push_back(std::move(hist));
  }
  return out;
}

Dataset load_interactions(const std::filesystem::path& path) {
  return parse_interactions(read_file(path));
}

std::string write_interactions_csv(const Dataset& data) {
  std::string out(kInteractionHeader);
  out.push_back('\n');
  for (const auto& s : data) {
    for (const auto& r : s.records) {
      out += csv_escape(r.student_id) + ',' + std::to_string(r.step) + ',' +
             csv_escape(r.question_id) + ',' + csv_escape(r.concept_id) + ',' +
             csv_escape(r.question_text) + ',' + csv_escape(r.concept_text) + ',' +
             std::to_string(r.response) + '\n';
    }
  }
  return out;
}

void save_interactions(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << write_interactions_csv(data);
}

std::vector<std::string> student_ids(const Dataset& data) {
  std::vector<std::string> ids;
  ids.reserve(data.size());
  for (const auto& s : data) ids.push_back(s.student_id);
  return ids;
}

Dataset select_students(const Dataset& data, std::span<const std::string> ids) {
  std::set<std::string> wanted(ids.begin(), ids.end());
  Dataset out;
  for (const auto& s : data) {
    if (wanted.count(s.student_id)) out.push_back(s);
  }
  return out;
}

std::size_t count_interactions(const Dataset& data) {
  std::size_t n = 0;
  for (const auto& s : data) n += s.records.size();
  return n;
}

std::vector<std::string> text_corpus(const Dataset& data) {
  std::map<std::string, std::string> by_question;
  for (const auto& s : data) {
    for (const auto& r : s.records) {
      by_question.emplace(r.question_id, r.concept_text + " " + r.question_text);
    }
  }
  std::vector<std::string> docs;
  docs.reserve(by_question.size());
  for (auto& [id, text] : by_question) docs.push_back(std::move(text));
  return docs;
}

// ---- LKT sequences ----------------------------------------------------------

LktSequence format_lkt_sequence(std::span<const InteractionRecord> records,
                                const Vocabulary& vocab) {
  if (records.empty()) throw std::invalid_argument("format_lkt_sequence: no interactions");
  LktSequence seq;
  seq.student_id = records.front().student_id;
  seq.token_ids.push_back(special::kCls);
  for (const auto& r : records) {
    for (auto id : encode(vocab, r.concept_text)) seq.token_ids.push_back(id);
    for (auto id : encode(vocab, r.question_text)) seq.token_ids.push_back(id);
    seq.response_positions.push_back(seq.token_ids.size());
    seq.token_ids.push_back(r.response ? special::kCorrect : special::kIncorrect);
    seq.question_ids.push_back(r.question_id);
    seq.responses.push_back(r.response);
  }
  seq.token_ids.push_back(special::kEos);
  return seq;
}

std::vector<LktSequence> window_sequence(const LktSequence& sequence, std::size_t max_len) {
  const std::size_t n = sequence.interaction_count();
  if (n == 0) throw std::invalid_argument("window_sequence: sequence has no interactions");
  // Interaction i occupies tokens [start(i), response_positions[i]].
  auto start = [&](std::size_t i) {
    return i == 0 ? std::size_t{1} : sequence.response_positions[i - 1] + 1;
  };
  const std::size_t budget = max_len >= 2 ? max_len - 2 : 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = sequence.response_positions[i] + 1 - start(i);
    if (len > budget) {
      throw ValidationError("interaction with question '" + sequence.question_ids[i] + "' has " +
                            std::to_string(len) + " tokens, more than max_len - 2 = " +
                            std::to_string(budget));
    }
  }
  if (sequence.token_ids.size() <= max_len) return {sequence};

  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [first, last] interactions
  std::size_t end = n;
  while (end > 0) {
    std::size_t first = end - 1;
    std::size_t used = sequence.response_positions[end - 1] + 1 - start(end - 1);
    while (first > 0) {
      const std::size_t len = sequence.response_positions[first - 1] + 1 - start(first - 1);
      if (used + len > budget) break;
      used += len;
      --first;
    }
    ranges.emplace_back(first, end - 1);
    end = first;
  }
  std::reverse(ranges.begin(), ranges.end());

  std::vector<LktSequence> windows;
  for (auto [first, last] : ranges) {
    LktSequence w;
    w.student_id = sequence.student_id;
    w.first_interaction = sequence.first_interaction + first;
    w.token_ids.push_back(special::kCls);
    for (std::size_t i = first; i <= last; ++i) {
      for (std::size_t p = start(i); p <= sequence.response_positions[i]; ++p) {
        w.token_ids.push_back(sequence.token_ids[p]);
      }
      w.response_positions.push_back(w.token_ids.size() - 1);
      w.question_ids.push_back(sequence.question_ids[i]);
      w.responses.push_back(sequence.responses[i]);
    }
    w.token_ids.push_back(special::kEos);
    windows.push_back(std::move(w));
  }
  return windows;
}

LktExample mask_interactions(const LktSequence& sequence, std::span<const std::size_t> targets) {
  LktExample ex;
  ex.student_id = sequence.student_id;
  ex.token_ids = sequence.token_ids;
  ex.response_positions = sequence.response_positions;
  ex.interaction_count = sequence.interaction_count();
  std::vector<std::size_t> sorted(targets.begin(), targets.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (auto t : sorted) {
    if (t >= ex.interaction_count) {
      throw std::out_of_range("mask_interactions: interaction " + std::to_string(t) +
                              " outside window of " + std::to_string(ex.interaction_count));
    }
    const std::size_t pos = sequence.response_positions[t];
    ex.token_ids[pos] = special::kMask;
    ex.mask_positions.push_back(pos);
    ex.labels.push_back(sequence.responses[t]);
    ex.mask_interactions.push_back(t);
  }
  return ex;
}

LktExample mask_responses(const LktSequence& sequence, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::invalid_argument("mask rate must be in (0, 1)");
  const std::size_t n = sequence.interaction_count();
  if (n == 0) throw std::invalid_argument("mask_responses: sequence has no response tokens");
  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < n; ++i) {
    if (uniform(rng) < rate) targets.push_back(i);
  }
  if (targets.empty()) {
    targets.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  }
  return mask_interactions(sequence, targets);
}

MlmExample mask_tokens_mlm(std::span<const TokenId> ids, std::size_t vocab_size, double rate,
                           std::uint64_t seed) {
  MlmExample ex;
  ex.token_ids.assign(ids.begin(), ids.end());
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!special::is_special(ids[i])) candidates.push_back(i);
  }
  if (candidates.empty()) return ex;
  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (auto i : candidates) {
    if (uniform(rng) < rate) ex.positions.push_back(i);
  }
  if (ex.positions.empty()) {
    ex.positions.push_back(
        candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)]);
  }
  const bool has_words = vocab_size > special::kCount;
  std::uniform_int_distribution<TokenId> random_word(
      static_cast<TokenId>(special::kCount),
      static_cast<TokenId>(has_words ? vocab_size - 1 : special::kCount));
  for (auto p : ex.positions) {
    ex.targets.push_back(ids[p]);
    const double u = uniform(rng);
    if (u < 0.8 || !has_words) {
      ex.token_ids[p] = special::kMask;
    } else if (u < 0.9) {
      ex.token_ids[p] = random_word(rng);
    }
  }
  return ex;
}

// ---- DKT ----------------------------------------------------------------------

QuestionIndex QuestionIndex::from_ids(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  QuestionIndex qi;
  for (std::size_t i = 0; i < ids.size(); ++i) qi.index_.emplace(ids[i], static_cast<std::int32_t>(i));
  qi.ids_ = std::move(ids);
  return qi;
}

QuestionIndex QuestionIndex::build(const Dataset& data) {
  std::vector<std::string> ids;
  for (const auto& s : data) {
    for (const auto& r : s.records) ids.push_back(r.question_id);
  }
  return from_ids(std::move(ids));
}

std::int32_t QuestionIndex::find(const std::string& question_id) const {
  auto it = index_.find(question_id);
  return it == index_.end() ? kUnknownQuestion : it->second;
}

std::vector<std::int32_t> DktExample::input_indices() const {
  std::vector<std::int32_t> out(question_indices.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    out[t] = question_indices[t] == kUnknownQuestion ? kUnknownQuestion
                                                     : 2 * question_indices[t] + responses[t];
  }
  return out;
}

DktExample encode_dkt(std::span<const InteractionRecord> records, const QuestionIndex& index,
                      UnseenQuestion policy) {
  DktExample ex;
  if (!records.empty()) ex.student_id = records.front().student_id;
  for (const auto& r : records) {
    const auto q = index.find(r.question_id);
    if (q == kUnknownQuestion && policy == UnseenQuestion::kError) {
      throw ValidationError("question '" + r.question_id + "' is not in the question index");
    }
    ex.question_indices.push_back(q);
    ex.responses.push_back(r.response);
  }
  return ex;
}

// ---- folds ----------------------------------------------------------------------

std::vector<std::string> FoldSplit::fold(std::size_t f) const {
  std::vector<std::string> out;
  for (const auto& [id, g] : assignment) {
    if (g == f) out.push_back(id);
  }
  return out;
}

std::vector<std::string> FoldSplit::all_except(std::size_t f) const {
  std::vector<std::string> out;
  for (const auto& [id, g] : assignment) {
    if (g != f) out.push_back(id);
  }
  return out;
}

std::vector<std::string> seeded_order(std::vector<std::string> ids, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  return ids;
}

FoldSplit split_folds(std::vector<std::string> ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("split_folds: k must be at least 2");
  auto order = seeded_order(std::move(ids), seed);
  if (order.size() < k) {
    throw ValidationError("split_folds: " + std::to_string(order.size()) +
                          " students is fewer than k = " + std::to_string(k));
  }
  FoldSplit split;
  split.k = k;
  for (std::size_t i = 0; i < order.size(); ++i) split.assignment.emplace(order[i], i % k);
  return split;
}

// ---- synthetic generator ------------------------------------------------------

double irt_probability(double ability, double difficulty, double discrimination) {
  return 1.0 / (1.0 + std::exp(-discrimination * (ability - difficulty)));
}

namespace {

const std::vector<std::string>& concept_pool() {
  static const std::vector<std::string> pool = {
      "sets",      "fractions",   "decimals",  "angles",     "triangles",
      "probability", "percentages", "ratios",  "exponents",  "polynomials",
      "matrices",  "vectors",     "logarithms", "sequences", "inequalities",
      "functions", "integers",    "primes",    "circles",    "statistics"};
  return pool;
}

std::string difficulty_keyword(double b) {
  // Septiles of the standard normal.
  if (b < -1.07) return "elementary";
  if (b < -0.57) return "basic";
  if (b < -0.18) return "easy";
  if (b < 0.18) return "moderate";
  if (b < 0.57) return "hard";
  if (b < 1.07) return "advanced";
  return "challenging";
}

std::string zero_pad(std::size_t v, std::size_t width) {
  std::string s = std::to_string(v);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticParams& p) {
  if (p.num_students < 1 || p.num_questions < 1 || p.num_concepts < 1) {
    throw ValidationError("synthetic generator counts must be >= 1");
  }
  if (p.min_interactions < 1 || p.max_interactions < p.min_interactions) {
    throw ValidationError("synthetic generator needs 1 <= min_interactions <= max_interactions");
  }
  if (!(p.ability_correlation >= 0.0 && p.ability_correlation <= 1.0)) {
    throw ValidationError("ability_correlation must be in [0, 1]");
  }
  Rng rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticData out;
  const auto& pool = concept_pool();
  for (std::size_t c = 0; c < p.num_concepts; ++c) {
    out.concept_names.push_back(c < pool.size() ? pool[c] : "topic" + std::to_string(c));
  }
  for (std::size_t q = 0; q < p.num_questions; ++q) {
    SyntheticQuestion sq;
    sq.id = p.question_prefix + std::to_string(q);
    sq.concept_index = q % p.num_concepts;
    sq.difficulty = normal(rng);
    sq.discrimination = std::exp(p.discrimination_log_sd * normal(rng));
    out.questions.push_back(sq);
  }

  const double shared = std::sqrt(p.ability_correlation);
  const double own = std::sqrt(1.0 - p.ability_correlation);
  const std::size_t width = std::to_string(p.num_students - 1).size();
  std::uniform_int_distribution<std::size_t> pick_question(0, p.num_questions - 1);
  std::uniform_int_distribution<std::size_t> pick_length(p.min_interactions, p.max_interactions);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  for (std::size_t s = 0; s < p.num_students; ++s) {
    StudentHistory hist;
    hist.student_id = p.student_prefix + zero_pad(s, width);
    const double general = normal(rng);
    std::vector<double> ability(p.num_concepts);
    for (auto& a : ability) a = shared * general + own * normal(rng);
    const std::size_t length = pick_length(rng);
    std::vector<double> probs;
    for (std::size_t t = 0; t < length; ++t) {
      const auto& q = out.questions[pick_question(rng)];
      const double prob = irt_probability(ability[q.concept_index], q.difficulty, q.discrimination);
      InteractionRecord rec;
      rec.student_id = hist.student_id;
      rec.step = static_cast<std::int64_t>(t);
      rec.question_id = q.id;
      rec.concept_id = "c" + std::to_string(q.concept_index);
      rec.concept_text = out.concept_names[q.concept_index];
      rec.question_text =
          out.concept_names[q.concept_index] + " exercise " + difficulty_keyword(q.difficulty);
      rec.response = uniform(rng) < prob ? 1 : 0;
      hist.records.push_back(std::move(rec));
      probs.push_back(prob);
    }
    out.data.push_back(std::move(hist));
    out.true_p.push_back(std::move(probs));
  }
  return out;
}

void save_true_p(const std::filesystem::path& path, const SyntheticData& synthetic) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "student_id,step,true_p\n";
  char buf[64];
  for (std::size_t s = 0; s < synthetic.data.size(); ++s) {
    const auto& hist = synthetic.data[s];
    for (std::size_t t = 0; t < hist.records.size(); ++t) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), synthetic.true_p[s][t]);
      out << csv_escape(hist.student_id) << ',' << hist.records[t].step << ','
          << std::string_view(buf, static_cast<std::size_t>(end - buf)) << '\n';
    }
  }
}

}  // namespace lkt
