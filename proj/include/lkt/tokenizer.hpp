// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lkt {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kCls = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kMask = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kCorrect = 5;
inline constexpr TokenId kIncorrect = 6;
inline constexpr std::size_t kCount = 7;

inline constexpr std::array<std::string_view, kCount> kNames = {
    "[PAD]", "[CLS]", "[EOS]", "[MASK]", "[UNK]", "[CORRECT]", "[INCORRECT]"};

inline bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kCount); }
inline bool is_response(TokenId id) { return id == kCorrect || id == kIncorrect; }
}  // namespace special

/// Token <-> id table. Ids 0..6 are always the reserved special tokens.
class Vocabulary {
 public:
  /// Vocabulary holding only the reserved tokens.
  Vocabulary();

  /// Throws ValidationError unless `tokens` starts with the reserved tokens in
  /// order and contains no duplicates.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const;
  /// Id for `token`, or [UNK].
  TokenId id(std::string_view token) const;
  /// Throws OutOfVocabularyError for ids outside [0, size).
  const std::string& token(TokenId id) const;

  /// One token per line; the line number is the id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Lowercases and splits on whitespace and punctuation. Punctuation marks
/// become their own tokens, except '-' and '_' which stay inside words.
/// Reserved names written in upper case ("[CORRECT]") are kept whole.
std::vector<std::string> split_words(std::string_view text);

/// Keeps the max_size - 7 most frequent words with frequency >= min_freq;
/// equal frequencies are ordered lexicographically.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t min_freq,
                       std::size_t max_size);

/// Never emits [PAD]; unknown words map to [UNK].
std::vector<TokenId> encode(const Vocabulary& vocab, std::string_view text);

std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids);

}  // namespace lkt
