#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "vocab.hpp"

namespace ddlm {

struct EditOp {
  enum class Kind { Substitute, Insert, Delete };
  Kind kind = Kind::Substitute;
  std::size_t position = 0;
  TokenId token = Vocab::kPad;  // unused for Delete

  friend bool operator==(const EditOp&, const EditOp&) = default;
};

struct CorruptionResult {
  TokenSeq x_t;
  double t = 0.0;
  std::vector<bool> mask_flags;     // mask process only
  std::vector<EditOp> edit_trace;   // edit process only
  std::size_t k_applied = 0;
};

// Independently replaces each non-pad position at or after `protect_prefix`
// with [MASK] with probability gamma(t).
inline CorruptionResult mask_corrupt(const TokenSeq& x0, double t, const NoiseSchedule& sched, CounterRng& rng,
                                     std::size_t protect_prefix = 0) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("mask_corrupt: t outside [0, 1]");
  CorruptionResult r;
  r.x_t = x0;
  r.t = t;
  r.mask_flags.assign(x0.capacity(), false);
  const double g = sched.eval(t);
  for (std::size_t i = protect_prefix; i < x0.capacity(); ++i) {
    if (x0[i] == Vocab::kPad) continue;
    if (rng.uniform() < g) {
      r.x_t[i] = Vocab::kMask;
      r.mask_flags[i] = true;
    }
  }
  return r;
}

// Applies one edit in place on the lattice. Insert shifts the suffix right
// into the pad region; Delete shifts left and pads the tail.
inline void apply_edit(TokenSeq& z, const EditOp& op) {
  const std::size_t cap = z.capacity();
  switch (op.kind) {
    case EditOp::Kind::Substitute:
      z[op.position] = op.token;
      break;
    case EditOp::Kind::Insert:
      for (std::size_t i = cap - 1; i > op.position; --i) z[i] = z[i - 1];
      z[op.position] = op.token;
      break;
    case EditOp::Kind::Delete:
      for (std::size_t i = op.position; i + 1 < cap; ++i) z[i] = z[i + 1];
      z[cap - 1] = Vocab::kPad;
      break;
  }
}

// Applies exactly k random edits inside [protect_prefix, length). Kinds are
// uniform over {Substitute, Insert, Delete}, except that Insert is not drawn
// while the lattice is full and only Insert is possible on an empty region.
inline CorruptionResult edit_corrupt_count(const TokenSeq& x0, std::size_t k, CounterRng& rng,
                                           std::size_t protect_prefix = 0,
                                           const Vocab& vocab = Vocab::standard()) {
  CorruptionResult r;
  r.x_t = x0;
  const std::vector<TokenId> alphabet = vocab.real_tokens();
  const std::size_t cap = x0.capacity();
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t len = r.x_t.length();
    const bool region_empty = len <= protect_prefix;
    const bool full = len >= cap;
    if (region_empty && full) break;
    EditOp op;
    if (region_empty) {
      op.kind = EditOp::Kind::Insert;
    } else if (full) {
      op.kind = rng.below(2) == 0 ? EditOp::Kind::Substitute : EditOp::Kind::Delete;
    } else {
      op.kind = static_cast<EditOp::Kind>(rng.below(3));
    }
    op.position = region_empty ? len : protect_prefix + rng.below(len - protect_prefix);
    if (op.kind != EditOp::Kind::Delete) op.token = alphabet[rng.below(alphabet.size())];
    apply_edit(r.x_t, op);
    r.edit_trace.push_back(op);
  }
  r.k_applied = r.edit_trace.size();
  return r;
}

inline std::size_t edit_budget(const TokenSeq& x0, double alpha, std::size_t protect_prefix = 0) {
  const std::size_t len = x0.length();
  const std::size_t n = len > protect_prefix ? len - protect_prefix : 0;
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * alpha));
}

// k_t = floor(|x0| * alpha(t)) edits, |x0| counting non-pad positions of the
// unprotected region.
inline CorruptionResult edit_corrupt(const TokenSeq& x0, double t, const EditSchedule& sched, CounterRng& rng,
                                     std::size_t protect_prefix = 0, const Vocab& vocab = Vocab::standard()) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("edit_corrupt: t outside [0, 1]");
  CorruptionResult r = edit_corrupt_count(x0, edit_budget(x0, sched.eval(t), protect_prefix), rng,
                                          protect_prefix, vocab);
  r.t = t;
  return r;
}

// Token-level edit distance, unit costs, O(|a||b|) time and O(|b|) memory.
inline std::size_t levenshtein(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Pads are stripped before comparison.
inline std::size_t levenshtein(const TokenSeq& a, const TokenSeq& b) {
  auto strip = [](const TokenSeq& s) {
    std::vector<TokenId> v;
    for (TokenId id : s.ids) {
      if (id != Vocab::kPad) v.push_back(id);
    }
    return v;
  };
  const auto sa = strip(a);
  const auto sb = strip(b);
  return levenshtein(std::span<const TokenId>(sa), std::span<const TokenId>(sb));
}

// Per-position kernel q(x_t[i] | x_s[i]) of the mask process, t > s.
inline double transition_prob(TokenId xs_tok, TokenId xt_tok, double s, double t, const NoiseSchedule& sched,
                              TokenId mask_id = Vocab::kMask) {
  if (!(t > s)) throw DegenerateTime("transition_prob requires t > s");
  if (xs_tok == mask_id) return xt_tok == mask_id ? 1.0 : 0.0;
  const double gs = sched.eval(s);
  const double gt = sched.eval(t);
  if (gs >= 1.0) throw DegenerateTime("unmasked token at gamma(s) = 1");
  if (xt_tok == xs_tok) return (1.0 - gt) / (1.0 - gs);
  if (xt_tok == mask_id) return (gt - gs) / (1.0 - gs);
  return 0.0;
}

}  // namespace ddlm
