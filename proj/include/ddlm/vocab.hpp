#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "error.hpp"

namespace ddlm {

using TokenId = std::int32_t;

inline constexpr int kDefaultMaxLen = 64;

// Character-level vocabulary for the arithmetic mini-language. Specials are
// written as bracketed symbols so they never collide with a single character.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kEos = 2;
  static constexpr int kNumSpecial = 3;

  Vocab() {
    tokens_ = {"[PAD]", "[MASK]", "[EOS]"};
    for (char c : std::string_view("0123456789+-*()=; aerstx")) {
      tokens_.emplace_back(1, c);
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      index_.emplace(tokens_[i], static_cast<TokenId>(i));
    }
  }

  static const Vocab& standard() {
    static const Vocab v;
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  TokenId mask_id() const { return kMask; }
  TokenId pad_id() const { return kPad; }
  TokenId eos_id() const { return kEos; }

  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecial; }
  bool valid(TokenId id) const { return id >= 0 && id < size(); }

  const std::string& symbol(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenId id_of(std::string_view sym) const {
    auto it = index_.find(std::string(sym));
    if (it == index_.end()) throw UnknownSymbol("unknown symbol '" + std::string(sym) + "'");
    return it->second;
  }

  // Non-special tokens; the alphabet edits draw from.
  std::vector<TokenId> real_tokens() const {
    std::vector<TokenId> out;
    for (TokenId id = kNumSpecial; id < size(); ++id) out.push_back(id);
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Fixed-capacity lattice of token ids. Physical length is always the
// capacity; the logical sequence ends at the first pad.
struct TokenSeq {
  std::vector<TokenId> ids;

  TokenSeq() = default;
  explicit TokenSeq(std::size_t capacity, TokenId fill = Vocab::kPad) : ids(capacity, fill) {}
  explicit TokenSeq(std::vector<TokenId> v) : ids(std::move(v)) {}

  std::size_t capacity() const { return ids.size(); }
  TokenId& operator[](std::size_t i) { return ids[i]; }
  TokenId operator[](std::size_t i) const { return ids[i]; }

  // Index of the first pad (== capacity when there is none).
  std::size_t length() const {
    auto it = std::find(ids.begin(), ids.end(), Vocab::kPad);
    return static_cast<std::size_t>(it - ids.begin());
  }

  std::span<const TokenId> content() const { return {ids.data(), length()}; }

  bool canonical() const {
    const std::size_t n = length();
    return std::all_of(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(),
                       [](TokenId t) { return t == Vocab::kPad; });
  }

  std::size_t count(TokenId id) const {
    return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), id));
  }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

inline TokenSeq encode(const Vocab& vocab, std::string_view text, std::size_t max_len = kDefaultMaxLen) {
  TokenSeq seq(max_len);
  std::size_t n = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    std::string_view sym;
    if (text[i] == '[') {
      const auto close = text.find(']', i);
      if (close == std::string_view::npos) throw UnknownSymbol("unterminated special symbol");
      sym = text.substr(i, close - i + 1);
    } else {
      sym = text.substr(i, 1);
    }
    const TokenId id = vocab.id_of(sym);
    if (n >= max_len) {
      throw CapacityExceeded("text needs more than " + std::to_string(max_len) + " tokens");
    }
    seq[n++] = id;
    i += sym.size();
  }
  return seq;
}

inline std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (id == vocab.pad_id()) continue;
    if (!vocab.valid(id)) throw UnknownSymbol("token id " + std::to_string(id) + " out of range");
    out += vocab.symbol(id);
  }
  return out;
}

inline std::string decode(const Vocab& vocab, const TokenSeq& seq) { return decode(vocab, seq.ids); }

// Display form for trajectory dumps: one character per position, masks as
// '_', [EOS] as '.', pads dropped.
inline std::string render_state(const Vocab& vocab, const TokenSeq& seq) {
  std::string out;
  for (TokenId id : seq.ids) {
    if (id == vocab.pad_id()) continue;
    if (id == vocab.mask_id()) {
      out += '_';
    } else if (id == vocab.eos_id()) {
      out += '.';
    } else {
      out += vocab.symbol(id);
    }
  }
  return out;
}

}  // namespace ddlm
