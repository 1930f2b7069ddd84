// SPDX-License-Identifier: Apache-2.0
#include "lkt/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <map>

#include "lkt/errors.hpp"

namespace lkt {

Vocabulary::Vocabulary() {
  for (auto name : special::kNames) {
    index_.emplace(std::string(name), static_cast<TokenId>(tokens_.size()));
    tokens_.emplace_back(name);
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < special::kCount) {
    throw ValidationError("vocabulary must start with the " + std::to_string(special::kCount) +
                          " reserved tokens");
  }
  for (std::size_t i = 0; i < special::kCount; ++i) {
    if (tokens[i] != special::kNames[i]) {
      throw ValidationError("vocabulary line " + std::to_string(i + 1) + " must be " +
                            std::string(special::kNames[i]) + ", found '" + tokens[i] + "'");
    }
  }
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  for (auto& t : tokens) {
    if (t.empty()) throw ValidationError("vocabulary contains an empty token");
    auto [it, inserted] = v.index_.emplace(t, static_cast<TokenId>(v.tokens_.size()));
    if (!inserted) throw ValidationError("duplicate vocabulary token '" + t + "'");
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  return find(token).value_or(special::kUnk);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw OutOfVocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                               std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary file " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

namespace {

bool is_word_char(unsigned char c) {
  return std::isalnum(c) || c == '-' || c == '_' || c >= 0x80;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == '[') {
      bool matched = false;
      for (std::size_t s = 0; s < special::kCount; ++s) {
        const auto name = special::kNames[s];
        if (text.substr(i, name.size()) == name) {
          flush();
          out.emplace_back(name);
          i += name.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (std::isspace(c)) {
      flush();
    } else if (is_word_char(c)) {
      word.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
    ++i;
  }
  flush();
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t min_freq,
                       std::size_t max_size) {
  if (min_freq < 1) throw ValidationError("build_vocab: min_freq must be >= 1");
  if (max_size <= special::kCount) {
    throw ValidationError("build_vocab: max_size must exceed " + std::to_string(special::kCount));
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus) {
    for (auto& w : split_words(doc)) {
      if (w.front() == '[' && std::find(special::kNames.begin(), special::kNames.end(), w) !=
                                  special::kNames.end()) {
        continue;
      }
      ++counts[w];
    }
  }
  if (counts.empty()) {
    std::clog << "warning: empty corpus, vocabulary holds only reserved tokens\n";
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, n] : counts) {
    if (n >= min_freq) ranked.emplace_back(w, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), max_size - special::kCount);
  std::vector<std::string> tokens(special::kNames.begin(), special::kNames.end());
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary::from_tokens(std::move(tokens));
}

std::vector<TokenId> encode(const Vocabulary& vocab, std::string_view text) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) {
    const TokenId id = vocab.id(w);
    ids.push_back(id == special::kPad ? special::kUnk : id);
  }
  return ids;
}

std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace lkt
