#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ddlm/objectives.hpp"

using namespace ddlm;

namespace {

ModelConfig small_config(int vocab, int max_len) {
  ModelConfig c;
  c.layers = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.vocab_size = vocab;
  c.max_len = max_len;
  return c;
}

// Output layer zeroed: every position predicts uniformly over non-mask ids.
template <class T>
Params<T> uniform_model(const ModelConfig& c) {
  auto p = Params<T>::init(c, 3);
  std::fill(p.values.begin() + static_cast<std::ptrdiff_t>(p.layout.w_out),
            p.values.begin() + static_cast<std::ptrdiff_t>(p.layout.b_out + c.vocab_size), T(0));
  return p;
}

ProbTable random_table(int d, CounterRng& rng) {
  ProbTable t(d);
  for (auto& v : t.prob) v = rng.uniform(0.02, 0.98);
  return t;
}

TokenSeq seq_of(std::vector<TokenId> v) { return TokenSeq(std::move(v)); }

}  // namespace

TEST(MaskedElbo, NoMaskedPositionsGivesZero) {
  const auto c = small_config(5, 6);
  const auto p = DenoiserParams::init(c, 1);
  const TokenSeq x0 = seq_of({3, 4, 3, 4, 2, 2});
  const auto r = masked_elbo_term_fixed(p, x0, x0, 0, 0.3, NoiseSchedule{});
  EXPECT_EQ(r.mask_term, 0.0);
  EXPECT_EQ(r.positions_counted, 0u);
}

TEST(MaskedElbo, UniformModelHandValue) {
  const auto c = small_config(5, 6);
  const auto p = uniform_model<double>(c);
  const TokenSeq x0 = seq_of({3, 4, 3, 4, 2, 2});
  TokenSeq xt = x0;
  xt[2] = c.mask_id;
  const auto r = masked_elbo_term_fixed(p, x0, xt, 0, 0.5, NoiseSchedule{ScheduleKind::linear});
  EXPECT_NEAR(r.mask_term, 2.0 * std::log(4.0), 1e-9);
  EXPECT_NEAR(r.mask_term, 2.7726, 1e-4);
  EXPECT_EQ(r.positions_counted, 1u);
}

TEST(MaskedElbo, DecreasesAsCorrectLogitRises) {
  const auto c = small_config(5, 6);
  auto p = DenoiserParams::init(c, 2);
  const TokenSeq x0 = seq_of({3, 4, 3, 4, 2, 2});
  TokenSeq xt = x0;
  xt[1] = xt[3] = c.mask_id;
  double prev = INFINITY;
  for (int i = 0; i < 10; ++i) {
    p.values[p.layout.b_out + 4] = static_cast<float>(0.5 * i);
    const double v = masked_elbo_term_fixed(p, x0, xt, 0, 0.4, NoiseSchedule{}).mask_term;
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(MaskedElbo, PromptNeverMasked) {
  const auto c = small_config(5, 6);
  const auto p = DenoiserParams::init(c, 1);
  const TokenSeq x0 = seq_of({3, 4, 3, 4, 2, 2});
  CounterRng rng(4);
  const auto r = masked_elbo_term(p, x0, 4, 1.0 - NoiseSchedule::kEps, NoiseSchedule{}, rng);
  EXPECT_EQ(r.positions_counted, 2u);
}

TEST(DiffLoss, PartsAddUpAndAreNonNegative) {
  const auto c = small_config(5, 12);
  const auto p = DenoiserParams::init(c, 5);
  Example ex{seq_of({3, 4, 3, 4, 3, 4, 3, 2, 2, 2, 2, 2}), 3};
  CounterRng rng(6);
  for (int i = 0; i < 200; ++i) {
    DiffLossConfig cfg;
    cfg.include_edit = i % 2 == 0;
    const auto r = diff_loss(p, ex, cfg, rng);
    EXPECT_GE(r.edit_term, 0.0);
    EXPECT_GE(r.mask_term, 0.0);
    EXPECT_NEAR(r.total, r.edit_term + r.mask_term, 1e-6);
    if (!cfg.include_edit) {
      EXPECT_EQ(r.edit_term, 0.0);
    }
  }
}

TEST(DiffLoss, EditTermVanishesForMemorizedSampleWithoutEdits) {
  const auto c = small_config(5, 8);
  auto p = uniform_model<double>(c);
  p.values[p.layout.b_out + 3] = 60.0;
  const TokenSeq x0 = seq_of({3, 3, 3, 3, 3, 3, 3, 3});
  CounterRng rng(7);
  const auto r = edit_term(p, x0, 0, 0.0, EditSchedule{}, NoiseSchedule{}, rng);
  EXPECT_EQ(r.positions_counted, 8u);
  EXPECT_LT(r.edit_term, 1e-20);
}

TEST(DiffLoss, GradientMatchesFiniteDifferenceOfFixedDraw) {
  const auto c = small_config(5, 8);
  auto p = Params<double>::init(c, 8);
  for (auto& v : p.values) v *= 20.0;
  Example ex{seq_of({3, 4, 3, 4, 3, 4, 2, 2}), 2};
  DiffLossConfig cfg;
  AlignedVector<double> grad(p.size(), 0.0);
  CounterRng r0(9);
  diff_loss(p, ex, cfg, r0, std::span<double>(grad));
  auto eval = [&](const Params<double>& q) {
    CounterRng r(9);
    return diff_loss(q, ex, cfg, r).total;
  };
  CounterRng pick(10);
  for (int i = 0; i < 20; ++i) {
    const auto k = pick.below(p.size());
    auto hi = p, lo = p;
    hi.values[k] += 1e-5;
    lo.values[k] -= 1e-5;
    const double fd = (eval(hi) - eval(lo)) / 2e-5;
    EXPECT_NEAR(grad[k], fd, 1e-5 + 1e-4 * std::abs(fd));
  }
}

TEST(AnyOrder, SinglePosition) {
  ProbTable t(1);
  t.at(0, 0) = 0.3;
  EXPECT_NEAR(ao_ar_nll_exact(t), -std::log(0.3), 1e-15);
  EXPECT_NEAR(elbo_exact(t, NoiseSchedule{}), -std::log(0.3), 1e-15);
}

TEST(AnyOrder, TwoPositionsHandEnumeration) {
  ProbTable t(2);
  t.at(0b00, 0) = 0.5;
  t.at(0b00, 1) = 0.25;
  t.at(0b10, 0) = 0.8;
  t.at(0b01, 1) = 0.6;
  const double order01 = -std::log(0.5) - std::log(0.6);
  const double order10 = -std::log(0.25) - std::log(0.8);
  EXPECT_NEAR(ao_ar_nll_exact(t), 0.5 * (order01 + order10), 1e-14);
}

TEST(AnyOrder, InvariantUnderRelabeling) {
  CounterRng rng(11);
  const int d = 4;
  const ProbTable t = random_table(d, rng);
  const std::vector<int> sigma{2, 0, 3, 1};  // new index of old position i
  ProbTable u(d);
  for (std::uint32_t s = 0; s < (1u << d); ++s) {
    std::uint32_t s2 = 0;
    for (int i = 0; i < d; ++i) {
      if (s & (1u << i)) s2 |= 1u << sigma[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < d; ++i) u.at(s2, sigma[static_cast<std::size_t>(i)]) = t.at(s, i);
  }
  EXPECT_NEAR(ao_ar_nll_exact(t), ao_ar_nll_exact(u), 1e-12);
}

TEST(AnyOrder, TooLong) {
  EXPECT_THROW(ProbTable(7), TooLong);
}

TEST(AnyOrder, PermutationValidity) {
  EXPECT_TRUE((Permutation{{2, 0, 1}}.valid()));
  EXPECT_FALSE((Permutation{{2, 2, 1}}.valid()));
}

TEST(Elbo, MatchesAnyOrderForRandomTables) {
  CounterRng rng(12);
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int d = 2; d <= 4; ++d) {
      for (int trial = 0; trial < 100; ++trial) {
        const ProbTable t = random_table(d, rng);
        EXPECT_NEAR(elbo_exact(t, NoiseSchedule{kind}), ao_ar_nll_exact(t), 1e-6);
      }
    }
  }
}

TEST(Elbo, PatternWeightMatchesTimeQuadrature) {
  // Composite Simpson over t of gamma' gamma^(k-1) (1 - gamma)^(d-k).
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const NoiseSchedule s{kind};
    for (int d = 1; d <= 6; ++d) {
      for (int k = 1; k <= d; ++k) {
        const int n = 20000;
        auto f = [&](double t) {
          const double g = s.eval(t);
          return s.deriv(t) * std::pow(g, k - 1) * std::pow(1.0 - g, d - k);
        };
        double acc = f(0.0) + f(1.0);
        for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(static_cast<double>(i) / n);
        EXPECT_NEAR(pattern_weight(k, d, s), acc / (3.0 * n), 1e-10) << d << " " << k;
      }
    }
  }
}

TEST(Elbo, PairedChangeIsIdentical) {
  CounterRng rng(13);
  const ProbTable t = random_table(3, rng);
  ProbTable u = t;
  // Shrinking the competing mass raises every target probability.
  for (auto& v : u.prob) v = v / (v + 0.5 * (1.0 - v));
  const double d_elbo = elbo_exact(u, NoiseSchedule{}) - elbo_exact(t, NoiseSchedule{});
  const double d_ar = ao_ar_nll_exact(u) - ao_ar_nll_exact(t);
  EXPECT_LT(d_elbo, 0.0);
  EXPECT_NEAR(d_elbo, d_ar, 1e-9);
}

TEST(Elbo, DenoiserTableSatisfiesEquivalence) {
  const auto c = small_config(6, 8);
  const auto p = DenoiserParams::init(c, 14);
  const TokenSeq x = seq_of({3, 4, 5, 3, 4, 5, 2, 2});
  const ProbTable t = denoiser_prob_table(p, x, {2, 3, 4, 5}, 2, NoiseSchedule{});
  for (double v : t.prob) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NEAR(elbo_exact(t, NoiseSchedule{}), ao_ar_nll_exact(t), 1e-6);
}

TEST(Constrained, WeightFollowsMaskCount) {
  TokenSeq x(16, 3);
  for (int i = 0; i < 4; ++i) x[static_cast<std::size_t>(i)] = Vocab::kMask;
  EXPECT_DOUBLE_EQ(constrained_weight(x), 0.25);
  for (int i = 4; i < 8; ++i) x[static_cast<std::size_t>(i)] = Vocab::kMask;
  EXPECT_DOUBLE_EQ(constrained_weight(x), 0.125);
  EXPECT_DOUBLE_EQ(constrained_weight(TokenSeq(16, 3)), 1.0);
}

TEST(Constrained, UnmaskedInputIsPlainReconstructionCE) {
  const auto c = small_config(5, 6);
  const auto p = DenoiserParams::init(c, 15);
  const TokenSeq x0 = seq_of({3, 4, 3, 4, 2, 2});
  CounterRng rng(16);
  const double v = constrained_loss(p, x0, x0, 1, 0.0, NoiseSchedule{}, rng);
  const auto logits = forward(p, x0, 0.0);
  std::vector<Target> tg;
  for (int i = 1; i < 6; ++i) tg.push_back({i, x0[static_cast<std::size_t>(i)], 1.0});
  EXPECT_NEAR(v, weighted_nll(logits, std::span<const Target>(tg), 1.0), 1e-9);
}

TEST(Constrained, FiniteAndNonNegativeWithAugmentation) {
  const auto c = small_config(27, 16);
  const auto p = DenoiserParams::init(c, 17);
  CounterRng rng(18);
  TokenSeq x0(16, 2);
  for (int i = 0; i < 12; ++i) x0[static_cast<std::size_t>(i)] = static_cast<TokenId>(3 + rng.below(3));
  for (int rep = 0; rep < 50; ++rep) {
    TokenSeq xi = x0;
    for (int i = 4; i < 16; ++i) {
      if (rng.bernoulli(0.5)) xi[static_cast<std::size_t>(i)] = Vocab::kMask;
    }
    const double v = constrained_loss(p, xi, x0, 4, 0.1, NoiseSchedule{}, rng);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  EXPECT_THROW(constrained_loss(p, x0, x0, 4, 0.2, NoiseSchedule{}, rng), ConfigError);
}

TEST(Surrogate, Examples) {
  const TokenSeq a = seq_of({1, 1, 1, 1, 0});
  const TokenSeq b = seq_of({3, 4, 5, 6, 0});
  std::vector<TokenSeq> two{a, b};
  EXPECT_DOUBLE_EQ(surrogate_step_loss(std::span<const TokenSeq>(two)), 0.25);
  std::vector<TokenSeq> same{a, a};
  EXPECT_DOUBLE_EQ(surrogate_step_loss(std::span<const TokenSeq>(same)), 1.0);
  const TokenSeq mid = seq_of({3, 4, 1, 1, 0});
  std::vector<TokenSeq> three{a, mid, b};
  EXPECT_GT(surrogate_step_loss(std::span<const TokenSeq>(three)), 0.25);
  std::vector<TokenSeq> rev{b, mid, a};
  EXPECT_DOUBLE_EQ(surrogate_step_loss(std::span<const TokenSeq>(three)),
                   surrogate_step_loss(std::span<const TokenSeq>(rev)));
  std::vector<TokenSeq> one{a};
  EXPECT_THROW(surrogate_step_loss(std::span<const TokenSeq>(one)), std::invalid_argument);
}

TEST(Trajectory, LogProbGradientMatchesFiniteDifference) {
  auto c = small_config(27, 24);
  const auto pf = DenoiserParams::init(c, 19);
  const ProgramSample prompt{"x = 5 ;", "assert x == 5", 5};
  SampleConfig sc;
  sc.block_size = 8;
  sc.steps_per_block = 3;
  sc.temperature = 0.8;
  CounterRng rng(20);
  const Trajectory tr = sample_prompt(pf, prompt, sc, NoiseSchedule{}, rng);
  auto pd = pf.cast<double>();
  AlignedVector<double> grad(pd.size(), 0.0);
  const double lp = trajectory_logprob_backward(pd, tr, sc.temperature, 1.0, std::span<double>(grad));
  EXPECT_NEAR(lp, tr.total_logprob(), 1e-3);
  CounterRng pick(21);
  for (int i = 0; i < 20; ++i) {
    const auto k = pick.below(pd.size());
    auto hi = pd, lo = pd;
    hi.values[k] += 1e-5;
    lo.values[k] -= 1e-5;
    const double fd = (trajectory_logprob_backward(hi, tr, sc.temperature, 0.0, std::span<double>()) -
                       trajectory_logprob_backward(lo, tr, sc.temperature, 0.0, std::span<double>())) /
                      2e-5;
    EXPECT_NEAR(grad[k], fd, 1e-6 + 1e-4 * std::abs(fd));
  }
}

TEST(Trajectory, ElboScoreUsesStepWeights) {
  Trajectory tr;
  StepRecord a;
  a.cond_time = 0.5;
  a.commits = {{0, 3, -1.0, false}, {1, 3, -0.5, false}};
  StepRecord b;
  b.cond_time = 0.25;
  b.commits = {{2, 3, -2.0, false}};
  tr.steps = {a, b};
  EXPECT_DOUBLE_EQ(trajectory_elbo_score(tr, NoiseSchedule{}), 2.0 * -1.5 + 4.0 * -2.0);
}

TEST(OnPolicy, AlwaysPassSingleStep) {
  const auto c = small_config(27, 24);
  const auto p = DenoiserParams::init(c, 22);
  const ProgramSample prompt{"x = 5 ;", "assert x == 5", 5};
  OnPolicyConfig cfg;
  cfg.sample.block_size = 64;
  cfg.sample.steps_per_block = 1;
  RunningBaseline base;
  CounterRng rng(23);
  // With a one-step trajectory the surrogate is the single pair term
  // 1 / d_Lev(all-mask window, final window) = 1 / window.
  auto s = onpolicy_objective(p, prompt, Verifier{}, cfg, base, rng);
  const int window = c.max_len - static_cast<int>(prompt.prompt.size()) - 1;
  EXPECT_EQ(s.trajectory.step_count(), 1u);
  EXPECT_DOUBLE_EQ(s.surrogate, 1.0 / window);
  EXPECT_DOUBLE_EQ(s.objective, s.surrogate - cfg.beta * s.verdict);
  EXPECT_EQ(base.count, 1u);
}

TEST(OnPolicy, BaselineIsRunningMean) {
  RunningBaseline b;
  for (double x : {1.0, 2.0, 6.0}) b.update(x);
  EXPECT_DOUBLE_EQ(b.value(), 3.0);
}

namespace {

// Toy policy over an 8-position window: each step either finishes every
// remaining position (probability sigmoid(theta0)) or reveals one; the
// final sample passes with probability sigmoid(theta1).
struct ToyRollout {
  double objective = 0;
  double dlogp[2] = {0, 0};
  std::size_t steps = 0;
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ToyRollout toy_rollout(const double theta[2], double beta, CounterRng& rng) {
  ToyRollout r;
  std::vector<TokenSeq> states{TokenSeq(8, Vocab::kMask)};
  TokenSeq cur = states.back();
  int next = 0;
  const double pf = sigmoid(theta[0]);
  while (next < 8) {
    if (rng.bernoulli(pf)) {
      r.dlogp[0] += 1.0 - pf;
      while (next < 8) cur[static_cast<std::size_t>(next++)] = 3;
    } else {
      r.dlogp[0] += -pf;
      cur[static_cast<std::size_t>(next++)] = 3;
    }
    states.push_back(cur);
  }
  const double pv = sigmoid(theta[1]);
  const bool pass = rng.bernoulli(pv);
  r.dlogp[1] = pass ? 1.0 - pv : -pv;
  r.steps = states.size() - 1;
  r.objective = surrogate_step_loss(std::span<const TokenSeq>(states)) - beta * (pass ? 1.0 : 0.0);
  return r;
}

}  // namespace

TEST(OnPolicy, BaselineLeavesEstimatorMeanUnchanged) {
  const double theta[2] = {-1.0, 0.3};
  const int n = 10000;
  double mean[2][2] = {}, sq[2][2] = {};
  for (int use_baseline = 0; use_baseline < 2; ++use_baseline) {
    CounterRng rng(100 + use_baseline);
    RunningBaseline base;
    for (int i = 0; i < n; ++i) {
      const ToyRollout r = toy_rollout(theta, 5.0, rng);
      const double adv = r.objective - (use_baseline ? base.value() : 0.0);
      base.update(r.objective);
      for (int k = 0; k < 2; ++k) {
        const double g = adv * r.dlogp[k];
        mean[use_baseline][k] += g;
        sq[use_baseline][k] += g * g;
      }
    }
  }
  for (int k = 0; k < 2; ++k) {
    double se2 = 0;
    for (int b = 0; b < 2; ++b) {
      const double m = mean[b][k] / n;
      se2 += (sq[b][k] / n - m * m) / n;
    }
    EXPECT_LE(std::abs(mean[0][k] / n - mean[1][k] / n), 3.0 * std::sqrt(se2)) << k;
  }
}

TEST(OnPolicy, ToyPolicyLearnsFewerSteps) {
  double theta[2] = {-2.0, 0.0};
  auto expected_steps = [&](std::uint64_t seed) {
    CounterRng rng(seed);
    double s = 0;
    for (int i = 0; i < 500; ++i) s += static_cast<double>(toy_rollout(theta, 0.0, rng).steps);
    return s / 500;
  };
  const double before = expected_steps(1);
  RunningBaseline base;
  CounterRng rng(2);
  for (int u = 0; u < 200; ++u) {
    double g[2] = {0, 0};
    for (int i = 0; i < 16; ++i) {
      const ToyRollout r = toy_rollout(theta, 0.0, rng);
      const double adv = r.objective - base.value();
      base.update(r.objective);
      for (int k = 0; k < 2; ++k) g[k] += adv * r.dlogp[k] / 16;
    }
    for (int k = 0; k < 2; ++k) theta[k] -= 2.0 * g[k];
  }
  EXPECT_LT(expected_steps(3), before);
}
