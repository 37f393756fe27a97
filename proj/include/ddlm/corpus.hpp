#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace ddlm {

struct ProgramSample {
  std::string prompt;  // "x = (3+4)*2 ;"
  std::string target;  // "assert x == 14"
  std::int64_t truth_value = 0;

  std::string program() const { return prompt + " " + target; }

  friend bool operator==(const ProgramSample&, const ProgramSample&) = default;
};

namespace detail {

struct Expr {
  std::string text;
  std::int64_t value = 0;
  bool composite = false;
};

inline Expr gen_literal(CounterRng& rng) {
  const auto v = static_cast<std::int64_t>(rng.below(100));
  return {std::to_string(v), v, false};
}

// depth 1 is a bare literal; depth d >= 2 is a binary node whose operands
// are literals or parenthesised subexpressions of depth <= d - 1.
inline Expr gen_expr(int depth, CounterRng& rng) {
  if (depth <= 1) return gen_literal(rng);
  auto operand = [&]() {
    if (depth - 1 >= 2 && rng.bernoulli(0.5)) {
      Expr e = gen_expr(depth - 1, rng);
      e.text = "(" + e.text + ")";
      return e;
    }
    return gen_literal(rng);
  };
  Expr lhs = operand();
  Expr rhs = operand();
  static constexpr char kOps[] = {'+', '-', '*'};
  const char op = kOps[rng.below(3)];
  Expr out;
  out.composite = true;
  out.text = lhs.text + op + rhs.text;
  switch (op) {
    case '+': out.value = lhs.value + rhs.value; break;
    case '-': out.value = lhs.value - rhs.value; break;
    default: out.value = lhs.value * rhs.value; break;
  }
  return out;
}

class ProgramParser {
 public:
  explicit ProgramParser(std::string_view text) : s_(text) {}

  std::int64_t run() {
    expect_word("x");
    expect_word("=");
    const std::int64_t value = expr();
    expect_word(";");
    expect_word("assert");
    expect_word("x");
    expect_word("==");
    const std::int64_t claimed = signed_int();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing input");
    if (claimed != value) {
      throw AssertionFailed("assertion failed: x is " + std::to_string(value) + ", claimed " +
                            std::to_string(claimed));
    }
    return value;
  }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw ParseError(why + " at offset " + std::to_string(pos_));
  }

  void skip_ws() {
    while (pos_ < s_.size() && s_[pos_] == ' ') ++pos_;
  }

  bool peek(char c) {
    skip_ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  void expect_word(std::string_view w) {
    skip_ws();
    if (s_.substr(pos_, w.size()) != w) fail("expected '" + std::string(w) + "'");
    pos_ += w.size();
  }

  std::int64_t checked(bool overflow, std::int64_t v) const {
    if (overflow) throw ParseError("integer overflow");
    return v;
  }

  std::int64_t expr() {
    std::int64_t acc = term();
    while (true) {
      if (peek('+')) {
        ++pos_;
        std::int64_t r;
        const bool o = __builtin_add_overflow(acc, term(), &r);
        acc = checked(o, r);
      } else if (peek('-')) {
        ++pos_;
        std::int64_t r;
        const bool o = __builtin_sub_overflow(acc, term(), &r);
        acc = checked(o, r);
      } else {
        return acc;
      }
    }
  }

  std::int64_t term() {
    std::int64_t acc = factor();
    while (peek('*')) {
      ++pos_;
      std::int64_t r;
      const bool o = __builtin_mul_overflow(acc, factor(), &r);
      acc = checked(o, r);
    }
    return acc;
  }

  std::int64_t factor() {
    if (peek('(')) {
      ++pos_;
      const std::int64_t v = expr();
      if (!peek(')')) fail("expected ')'");
      ++pos_;
      return v;
    }
    return unsigned_int();
  }

  std::int64_t unsigned_int() {
    skip_ws();
    const std::size_t start = pos_;
    std::int64_t v = 0;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      std::int64_t r;
      bool o = __builtin_mul_overflow(v, 10, &r);
      o = o || __builtin_add_overflow(r, s_[pos_] - '0', &r);
      v = checked(o, r);
      ++pos_;
    }
    if (pos_ == start) fail("expected integer");
    return v;
  }

  std::int64_t signed_int() {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == '-') {
      ++pos_;
      if (pos_ < s_.size() && s_[pos_] == ' ') fail("space after sign");
      return -unsigned_int();
    }
    return unsigned_int();
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Interprets `x = <expr> ; assert x == <int>`. Returns x, or throws
// ParseError / AssertionFailed.
inline std::int64_t evaluate_program(std::string_view text) { return detail::ProgramParser(text).run(); }

inline ProgramSample make_sample(int depth, CounterRng& rng, std::size_t max_len = kDefaultMaxLen) {
  while (true) {
    const detail::Expr e = detail::gen_expr(depth, rng);
    ProgramSample s{"x = " + e.text + " ;", "assert x == " + std::to_string(e.value), e.value};
    if (s.program().size() <= max_len) return s;
  }
}

// Sample i depends only on (seed, i).
inline std::vector<ProgramSample> gen_corpus(std::uint64_t seed, std::size_t n, int grammar_depth,
                                             std::size_t max_len = kDefaultMaxLen) {
  std::vector<ProgramSample> out;
  out.reserve(n);
  const CounterRng base(seed);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = base.fork(i);
    out.push_back(make_sample(grammar_depth, rng, max_len));
  }
  return out;
}

// Prompts drawn from a separate seed stream, skipping any prompt that occurs
// in `train`. May return fewer than n when the grammar is nearly exhausted.
inline std::vector<ProgramSample> gen_heldout(const std::vector<ProgramSample>& train, std::uint64_t seed,
                                              std::size_t n, int grammar_depth,
                                              std::size_t max_len = kDefaultMaxLen) {
  std::unordered_set<std::string> seen;
  for (const auto& s : train) seen.insert(s.prompt);
  std::vector<ProgramSample> out;
  const CounterRng base(seed ^ 0x5EEDF00DULL, 1);
  for (std::size_t i = 0; out.size() < n && i < 64 * n + 1024; ++i) {
    CounterRng rng = base.fork(i);
    ProgramSample s = make_sample(grammar_depth, rng, max_len);
    if (seen.insert(s.prompt).second) out.push_back(std::move(s));
  }
  return out;
}

inline void write_corpus(std::ostream& os, const std::vector<ProgramSample>& samples) {
  for (const auto& s : samples) os << s.prompt << '\t' << s.target << '\t' << s.truth_value << '\n';
}

inline void write_corpus(const std::string& path, const std::vector<ProgramSample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  write_corpus(f, samples);
}

inline std::vector<ProgramSample> read_corpus(std::istream& is) {
  std::vector<ProgramSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ProgramSample s;
    std::string value;
    if (!std::getline(ls, s.prompt, '\t') || !std::getline(ls, s.target, '\t') || !std::getline(ls, value)) {
      throw ParseError("corpus line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    try {
      std::size_t used = 0;
      s.truth_value = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ParseError("corpus line " + std::to_string(lineno) + ": bad truth_value '" + value + "'");
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ProgramSample> read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open corpus " + path);
  return read_corpus(f);
}

// A training sequence on the lattice: the prompt (plus separator) followed
// by the target, with the rest of the window filled by [EOS].
struct Example {
  TokenSeq x0;
  std::size_t prompt_len = 0;
};

inline Example make_example(const Vocab& vocab, const ProgramSample& s, std::size_t max_len = kDefaultMaxLen) {
  Example ex;
  ex.x0 = encode(vocab, s.program(), max_len);
  ex.prompt_len = s.prompt.size() + 1;
  const std::size_t n = ex.x0.length();
  for (std::size_t i = n; i < max_len; ++i) ex.x0[i] = vocab.eos_id();
  return ex;
}

inline std::vector<Example> make_examples(const Vocab& vocab, const std::vector<ProgramSample>& samples,
                                          std::size_t max_len = kDefaultMaxLen) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_example(vocab, s, max_len));
  return out;
}

// Prompt lattice: prompt + separator, all later positions masked.
inline TokenSeq prompt_lattice(const Vocab& vocab, const ProgramSample& s, std::size_t max_len = kDefaultMaxLen) {
  TokenSeq seq = encode(vocab, s.prompt + " ", max_len);
  for (std::size_t i = s.prompt.size() + 1; i < max_len; ++i) seq[i] = vocab.mask_id();
  return seq;
}

// Program text of a generated lattice: everything up to the first [EOS].
inline std::string program_text(const Vocab& vocab, const TokenSeq& seq) {
  std::vector<TokenId> ids;
  for (TokenId id : seq.ids) {
    if (id == vocab.eos_id() || id == vocab.pad_id()) break;
    ids.push_back(id);
  }
  return decode(vocab, ids);
}

}  // namespace ddlm
