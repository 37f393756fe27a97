#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ddlm/corruption.hpp"

using namespace ddlm;

namespace {

TokenSeq real_seq(std::size_t n, std::size_t cap, CounterRng& rng) {
  const auto alphabet = Vocab::standard().real_tokens();
  TokenSeq s(cap);
  for (std::size_t i = 0; i < n; ++i) s[i] = alphabet[rng.below(alphabet.size())];
  return s;
}

// Textbook recursive definition, no memoisation.
std::size_t lev_recursive(const std::vector<TokenId>& a, std::size_t i, const std::vector<TokenId>& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  if (a[i] == b[j]) return lev_recursive(a, i + 1, b, j + 1);
  return 1 + std::min({lev_recursive(a, i + 1, b, j), lev_recursive(a, i, b, j + 1),
                       lev_recursive(a, i + 1, b, j + 1)});
}

std::vector<std::vector<TokenId>> all_strings(int max_len, int alphabet) {
  std::vector<std::vector<TokenId>> out{{}};
  std::vector<std::vector<TokenId>> frontier{{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& s : frontier) {
      for (int c = 0; c < alphabet; ++c) {
        auto t = s;
        t.push_back(static_cast<TokenId>(3 + c));
        next.push_back(t);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace

TEST(Schedule, EndpointsAndMonotone) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const NoiseSchedule s{kind};
    EXPECT_NEAR(s.eval(0.0), 0.0, 1e-15);
    EXPECT_NEAR(s.eval(1.0), 1.0, 1e-15);
    double prev = s.eval(0.0);
    for (int i = 1; i <= 1000; ++i) {
      const double g = s.eval(i / 1000.0);
      EXPECT_GE(g, prev);
      prev = g;
    }
  }
}

TEST(Schedule, DerivativeMatchesFiniteDifference) {
  CounterRng rng(1);
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const NoiseSchedule s{kind};
    for (int i = 0; i < 100; ++i) {
      const double t = rng.uniform(0.01, 0.99);
      const double h = 1e-5;
      const double fd = (s.eval(t + h) - s.eval(t - h)) / (2 * h);
      EXPECT_NEAR(s.deriv(t), fd, 1e-6);
    }
  }
}

TEST(Schedule, WeightClampedAndInverse) {
  const NoiseSchedule lin{ScheduleKind::linear};
  EXPECT_DOUBLE_EQ(lin.weight(0.5), 2.0);
  EXPECT_DOUBLE_EQ(lin.weight(0.0), 1.0 / NoiseSchedule::kEps);
  const NoiseSchedule cos{ScheduleKind::cosine};
  for (double g : {0.0, 0.1, 0.5, 0.9, 1.0}) EXPECT_NEAR(cos.eval(cos.inverse(g)), g, 1e-12);
  EXPECT_THROW(schedule_kind_from("quadratic"), ConfigError);
  EXPECT_EQ(schedule_kind_from(to_string(ScheduleKind::cosine)), ScheduleKind::cosine);
}

TEST(Schedule, EditRateBounded) {
  const EditSchedule e;
  for (int i = 0; i <= 100; ++i) {
    const double a = e.eval(i / 100.0);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 0.1);
  }
  EXPECT_THROW(EditSchedule(0.2), ConfigError);
  EXPECT_THROW(EditSchedule(0.0), ConfigError);
}

TEST(MaskCorrupt, Endpoints) {
  CounterRng rng(2);
  const TokenSeq x0 = real_seq(40, 64, rng);
  const auto r0 = mask_corrupt(x0, 0.0, NoiseSchedule{}, rng);
  EXPECT_EQ(r0.x_t, x0);
  const auto r1 = mask_corrupt(x0, 1.0, NoiseSchedule{}, rng);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(r1.x_t[i], i < 40 ? Vocab::kMask : Vocab::kPad);
}

TEST(MaskCorrupt, FlagsMatchAndPadsUntouched) {
  CounterRng rng(3);
  const TokenSeq x0 = real_seq(30, 64, rng);
  for (int rep = 0; rep < 50; ++rep) {
    const auto r = mask_corrupt(x0, 0.5, NoiseSchedule{ScheduleKind::cosine}, rng);
    for (std::size_t i = 0; i < 64; ++i) {
      EXPECT_EQ(r.mask_flags[i], r.x_t[i] == Vocab::kMask);
      if (!r.mask_flags[i]) {
        EXPECT_EQ(r.x_t[i], x0[i]);
      }
    }
  }
}

TEST(MaskCorrupt, ProtectedPrefix) {
  CounterRng rng(4);
  const TokenSeq x0 = real_seq(30, 32, rng);
  const auto r = mask_corrupt(x0, 1.0, NoiseSchedule{}, rng, 10);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(r.x_t[i], x0[i]);
  for (std::size_t i = 10; i < 30; ++i) EXPECT_EQ(r.x_t[i], Vocab::kMask);
}

TEST(MaskCorrupt, SingleDrawBinomialBand) {
  CounterRng rng(5);
  const TokenSeq x0 = real_seq(1000, 1000, rng);
  const auto r = mask_corrupt(x0, 0.3, NoiseSchedule{}, rng);
  const auto m = static_cast<double>(r.x_t.count(Vocab::kMask));
  EXPECT_NEAR(m, 300.0, 3 * std::sqrt(1000 * 0.3 * 0.7));
}

TEST(EditCorrupt, BudgetArithmetic) {
  CounterRng rng(6);
  const TokenSeq x0 = real_seq(50, 64, rng);
  const auto r = edit_corrupt(x0, 1.0, EditSchedule{0.1}, rng);
  EXPECT_EQ(r.k_applied, 5u);
  EXPECT_EQ(r.edit_trace.size(), 5u);
  const auto z = edit_corrupt(x0, 0.0, EditSchedule{0.1}, rng);
  EXPECT_EQ(z.k_applied, 0u);
  EXPECT_TRUE(z.edit_trace.empty());
  EXPECT_EQ(z.x_t, x0);
}

TEST(EditCorrupt, TraceReplaysAndIntroducesOnlyRealTokens) {
  CounterRng rng(7);
  const Vocab& v = Vocab::standard();
  for (int rep = 0; rep < 200; ++rep) {
    const TokenSeq x0 = real_seq(1 + rng.below(64), 64, rng);
    const auto r = edit_corrupt_count(x0, rng.below(8), rng);
    TokenSeq z = x0;
    for (const auto& op : r.edit_trace) {
      EXPECT_LT(op.position, 64u);
      if (op.kind != EditOp::Kind::Delete) {
        EXPECT_FALSE(v.is_special(op.token));
      }
      apply_edit(z, op);
    }
    EXPECT_EQ(z, r.x_t);
    EXPECT_TRUE(r.x_t.canonical());
    EXPECT_EQ(r.x_t.count(Vocab::kMask), 0u);
  }
}

TEST(EditCorrupt, LevenshteinBound) {
  CounterRng rng(8);
  for (int rep = 0; rep < 10000; ++rep) {
    const TokenSeq x0 = real_seq(1 + rng.below(64), 64, rng);
    const auto r = edit_corrupt(x0, rng.uniform(), EditSchedule{0.1}, rng);
    ASSERT_LE(levenshtein(x0, r.x_t), r.k_applied);
  }
}

TEST(EditCorrupt, DistinctSubstitutionsAttainBound) {
  const TokenSeq x0(std::vector<TokenId>{3, 4, 5, 6, 0, 0});
  TokenSeq z = x0;
  apply_edit(z, {EditOp::Kind::Substitute, 0, 7});
  apply_edit(z, {EditOp::Kind::Substitute, 2, 8});
  EXPECT_EQ(levenshtein(x0, z), 2u);
}

TEST(EditCorrupt, ShiftSemantics) {
  TokenSeq z(std::vector<TokenId>{3, 4, 5, 0, 0});
  apply_edit(z, {EditOp::Kind::Insert, 1, 9});
  EXPECT_EQ(z.ids, (std::vector<TokenId>{3, 9, 4, 5, 0}));
  apply_edit(z, {EditOp::Kind::Delete, 0, 0});
  EXPECT_EQ(z.ids, (std::vector<TokenId>{9, 4, 5, 0, 0}));
}

TEST(Levenshtein, Examples) {
  const Vocab& v = Vocab::standard();
  const TokenSeq a = encode(v, "aaa", 8);
  EXPECT_EQ(levenshtein(a, a), 0u);
  EXPECT_EQ(levenshtein(a, encode(v, "", 8)), 3u);
  // letters outside the vocabulary map to token ids directly
  auto ids = [](std::string_view s) {
    std::vector<TokenId> out;
    for (char c : s) out.push_back(static_cast<TokenId>(c));
    return out;
  };
  const auto k = ids("kitten");
  const auto s = ids("sitting");
  EXPECT_EQ(levenshtein(std::span<const TokenId>(k), std::span<const TokenId>(s)), 3u);
}

TEST(Levenshtein, AgreesWithExhaustiveRecursion) {
  const auto strings = all_strings(8, 3);
  // All pairs of length <= 8 is ~96M pairs; the full length-<=4 cross product
  // plus a deterministic sweep pairing each string with strided partners
  // covers every length combination up to 8.
  const auto small = all_strings(4, 3);
  for (const auto& a : small) {
    for (const auto& b : small) {
      ASSERT_EQ(levenshtein(std::span<const TokenId>(a), std::span<const TokenId>(b)), lev_recursive(a, 0, b, 0));
    }
  }
  for (std::size_t i = 0; i < strings.size(); ++i) {
    for (std::size_t j = (i * 7919) % 101; j < strings.size(); j += 977) {
      const auto& a = strings[i];
      const auto& b = strings[j];
      ASSERT_EQ(levenshtein(std::span<const TokenId>(a), std::span<const TokenId>(b)), lev_recursive(a, 0, b, 0));
    }
  }
}

TEST(Kernel, Cases) {
  const NoiseSchedule lin;
  EXPECT_DOUBLE_EQ(transition_prob(5, 5, 0.0, 0.4, lin), 0.6);
  EXPECT_DOUBLE_EQ(transition_prob(Vocab::kMask, Vocab::kMask, 0.2, 0.4, lin), 1.0);
  EXPECT_DOUBLE_EQ(transition_prob(Vocab::kMask, 5, 0.2, 0.4, lin), 0.0);
  EXPECT_DOUBLE_EQ(transition_prob(5, 6, 0.2, 0.4, lin), 0.0);
  EXPECT_NEAR(transition_prob(5, Vocab::kMask, 0.2, 0.6, lin), 0.5, 1e-15);
  EXPECT_THROW(transition_prob(5, 5, 0.4, 0.4, lin), DegenerateTime);
  EXPECT_THROW(transition_prob(5, 5, 1.0, 1.5, lin), DegenerateTime);
}

TEST(Kernel, CompositionMatchesMarginal) {
  CounterRng rng(9);
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const NoiseSchedule sched{kind};
    for (int i = 0; i < 100; ++i) {
      double s = rng.uniform(0.0, 0.99);
      double t = rng.uniform(0.0, 0.99);
      if (s > t) std::swap(s, t);
      if (t - s < 1e-6) t = s + 1e-3;
      const TokenId x0 = 7;
      for (TokenId xt : {x0, Vocab::kMask}) {
        double composed = 0;
        for (TokenId c : {x0, Vocab::kMask}) {
          const double q_c = c == Vocab::kMask ? sched.eval(s) : 1.0 - sched.eval(s);
          composed += transition_prob(c, xt, s, t, sched) * q_c;
        }
        const double marginal = xt == Vocab::kMask ? sched.eval(t) : 1.0 - sched.eval(t);
        EXPECT_NEAR(composed, marginal, 1e-12);
      }
    }
  }
}
