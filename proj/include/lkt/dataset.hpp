// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lkt/tokenizer.hpp"

namespace lkt {

/// One answered question: (question, concept, response) at a step.
struct InteractionRecord {
  std::string student_id;
  std::int64_t step = 0;
  std::string question_id;
  std::string concept_id;
  std::string question_text;
  std::string concept_text;
  int response = 0;
};

/// All interactions of one student, ordered by strictly increasing step.
struct StudentHistory {
  std::string student_id;
  std::vector<InteractionRecord> records;
};

using Dataset = std::vector<StudentHistory>;

inline constexpr std::string_view kInteractionHeader =
    "student_id,step,question_id,concept_id,question_text,concept_text,response";

/// Parses an RFC 4180 interaction CSV. Students are returned sorted by id and
/// each history sorted by step. Throws ValidationError naming the offending
/// row on missing fields, non-binary responses, or duplicate steps.
Dataset load_interactions(const std::filesystem::path& path);
Dataset parse_interactions(std::string_view csv_text);
void save_interactions(const std::filesystem::path& path, const Dataset& data);
std::string write_interactions_csv(const Dataset& data);

/// RFC 4180 field splitting; exposed for the sidecar readers.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::string csv_escape(std::string_view field);

std::vector<std::string> student_ids(const Dataset& data);
Dataset select_students(const Dataset& data, std::span<const std::string> ids);
std::size_t count_interactions(const Dataset& data);

/// Concept and question texts, one document per distinct question.
std::vector<std::string> text_corpus(const Dataset& data);

// ---- LKT text sequences -----------------------------------------------------

/// Token layout: [CLS] (concept tokens, question tokens, response token)* [EOS].
struct LktSequence {
  std::string student_id;
  std::vector<TokenId> token_ids;
  /// Position of each interaction's response token, strictly increasing.
  std::vector<std::size_t> response_positions;
  std::vector<std::string> question_ids;
  std::vector<int> responses;
  /// Index of this sequence's first interaction in the full history.
  std::size_t first_interaction = 0;

  std::size_t interaction_count() const { return response_positions.size(); }
};

LktSequence format_lkt_sequence(std::span<const InteractionRecord> records,
                                const Vocabulary& vocab);

/// Splits at interaction boundaries so each window fits in max_len tokens
/// (including its own [CLS]/[EOS]). Windows fill greedily from the most recent
/// interaction backwards and are returned in chronological order.
std::vector<LktSequence> window_sequence(const LktSequence& sequence, std::size_t max_len = 512);

/// A sequence with some response tokens replaced by [MASK].
struct LktExample {
  std::string student_id;
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> response_positions;
  std::vector<std::size_t> mask_positions;
  std::vector<int> labels;
  /// Interaction index (within the window) of each mask position.
  std::vector<std::size_t> mask_interactions;
  std::size_t interaction_count = 0;
};

/// Each response token is masked independently with probability `rate`; if
/// none is drawn, one uniformly chosen response is masked.
LktExample mask_responses(const LktSequence& sequence, double rate, std::uint64_t seed);

/// Masks exactly the listed interactions (indices into the window).
LktExample mask_interactions(const LktSequence& sequence, std::span<const std::size_t> targets);

/// Plain-text masked-language-model example: 15% of non-special tokens chosen,
/// of which 80% become [MASK], 10% a random word, 10% unchanged.
struct MlmExample {
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

MlmExample mask_tokens_mlm(std::span<const TokenId> ids, std::size_t vocab_size, double rate,
                           std::uint64_t seed);

// ---- DKT numeric sequences --------------------------------------------------

inline constexpr std::int32_t kUnknownQuestion = -1;

/// Dense question-id -> index map (ids sorted lexicographically).
class QuestionIndex {
 public:
  QuestionIndex() = default;
  static QuestionIndex build(const Dataset& data);
  static QuestionIndex from_ids(std::vector<std::string> ids);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  /// kUnknownQuestion when absent.
  std::int32_t find(const std::string& question_id) const;

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::int32_t> index_;
};

enum class UnseenQuestion { kError, kSentinel };

struct DktExample {
  std::string student_id;
  std::vector<std::int32_t> question_indices;
  std::vector<int> responses;

  /// 2 * question + response per step; kUnknownQuestion for unseen questions.
  std::vector<std::int32_t> input_indices() const;
};

DktExample encode_dkt(std::span<const InteractionRecord> records, const QuestionIndex& index,
                      UnseenQuestion policy = UnseenQuestion::kError);

// ---- cross-validation ----------------------------------------------------------

struct FoldSplit {
  std::size_t k = 0;
  std::map<std::string, std::size_t> assignment;

  std::vector<std::string> fold(std::size_t f) const;
  std::vector<std::string> all_except(std::size_t f) const;
};

/// Seeded shuffle of the sorted ids, then round-robin assignment.
FoldSplit split_folds(std::vector<std::string> ids, std::size_t k, std::uint64_t seed);

/// Seeded permutation of the sorted ids. Taking a prefix of it gives nested
/// student subsets for increasing fractions.
std::vector<std::string> seeded_order(std::vector<std::string> ids, std::uint64_t seed);

// ---- synthetic data ----------------------------------------------------------

struct SyntheticParams {
  std::size_t num_students = 500;
  std::size_t num_questions = 50;
  std::size_t num_concepts = 10;
  std::size_t min_interactions = 20;
  std::size_t max_interactions = 40;
  /// Share of ability variance common to all of a student's concepts.
  double ability_correlation = 0.6;
  double discrimination_log_sd = 0.25;
  /// Prefixes for question and student ids; change them to build a second
  /// domain with disjoint questions over the same concepts.
  std::string question_prefix = "q";
  std::string student_prefix = "s";
  std::uint64_t seed = 1;
};

struct SyntheticQuestion {
  std::string id;
  std::size_t concept_index = 0;
  double difficulty = 0.0;
  double discrimination = 1.0;
};

struct SyntheticData {
  Dataset data;
  /// Generator probability of a correct answer, aligned with data[s].records.
  std::vector<std::vector<double>> true_p;
  std::vector<SyntheticQuestion> questions;
  std::vector<std::string> concept_names;
};

/// Two-parameter IRT simulator: P(correct) = sigmoid(a_q (theta_{s,c(q)} - b_q)).
SyntheticData generate_synthetic(const SyntheticParams& params);

double irt_probability(double ability, double difficulty, double discrimination);

/// Sidecar `student_id,step,true_p`.
void save_true_p(const std::filesystem::path& path, const SyntheticData& synthetic);

}  // namespace lkt
