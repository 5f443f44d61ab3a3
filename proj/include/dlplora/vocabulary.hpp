#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dlplora/errors.hpp"

namespace dlplora {

using TokenId = std::uint32_t;

// Whitespace word tokenizer over a fixed vocabulary. Sentence punctuation
// (". ! ?") and newlines are split off as their own tokens; unknown words map
// to the reserved <unk> id.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kPeriod = 3;
  static constexpr TokenId kBang = 4;
  static constexpr TokenId kQuestion = 5;
  static constexpr TokenId kNewline = 6;
  static constexpr std::size_t kReservedCount = 7;

  Vocabulary() {
    for (const char* t : {"<pad>", "<unk>", "<eos>", ".", "!", "?", "\n"}) add(t);
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char c : text) {
      if (c == '\n') {
        flush();
        out.emplace_back("\n");
      } else if (c == ' ' || c == '\t' || c == '\r') {
        flush();
      } else if (c == '.' || c == '!' || c == '?') {
        flush();
        out.emplace_back(1, c);
      } else {
        cur.push_back(c);
      }
    }
    flush();
    return out;
  }

  TokenId add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  // Deterministic: words are added in sorted order.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split(t)) words.insert(std::move(w));
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    if (tokens.size() < kReservedCount) throw FormatError("vocabulary misses reserved tokens");
    for (std::size_t i = 0; i < kReservedCount; ++i) {
      if (tokens[i] != v.tokens_[i]) {
        throw FormatError("vocabulary reserved token " + std::to_string(i) + " mismatch");
      }
    }
    for (std::size_t i = kReservedCount; i < tokens.size(); ++i) {
      if (v.add(tokens[i]) != i) throw FormatError("duplicate vocabulary token '" + tokens[i] + "'");
    }
    return v;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw InputError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split(text)) ids.push_back(id(w));
    return ids;
  }

  // Ids past the vocabulary (a model may emit any id below vocab_size) render
  // as <unk>.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId t : ids) {
      if (t == kEos || t == kPad) continue;
      const std::string& w = t < tokens_.size() ? tokens_[t] : tokens_[kUnk];
      if (!out.empty() && out.back() != '\n' && w != "\n") out.push_back(' ');
      out += w;
    }
    return out;
  }

  static bool is_delimiter(TokenId id) noexcept {
    return id == kPeriod || id == kBang || id == kQuestion || id == kNewline;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace dlplora
