#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "corpus.hpp"
#include "corruption.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "schedule.hpp"
#include "verifier.hpp"

namespace ddlm {

struct LossBreakdown {
  double total = 0.0;
  double edit_term = 0.0;
  double mask_term = 0.0;
  std::size_t positions_counted = 0;
};

struct Permutation {
  std::vector<int> order;

  bool valid() const {
    std::vector<int> s = order;
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] != static_cast<int>(i)) return false;
    }
    return true;
  }
};

// Conditioning time of a lattice: gamma^-1 of the masked fraction among the
// non-pad positions after the prompt. Sampling uses the same definition.
inline double effective_time(const TokenSeq& x, std::size_t prompt_len, const NoiseSchedule& sched,
                             TokenId mask_id = Vocab::kMask) {
  std::size_t window = 0, masked = 0;
  for (std::size_t i = prompt_len; i < x.capacity(); ++i) {
    if (x[i] == Vocab::kPad) continue;
    ++window;
    masked += x[i] == mask_id;
  }
  return conditioning_time(masked, window, sched);
}

namespace detail {

// Evaluates sum(targets) on one forward pass; accumulates scale * gradient
// into `grad` when it is non-empty.
template <class T>
double nll_term(const Params<T>& p, const TokenSeq& x, double t, std::vector<Target> targets, std::span<T> grad,
                double scale, double temperature = 1.0) {
  if (targets.empty()) return 0.0;
  LossGraph<T> g;
  g.tape = forward_tape(p, std::span<const TokenId>(x.ids), t);
  g.targets = std::move(targets);
  g.temperature = temperature;
  const double value = g.value();
  if (!grad.empty()) {
    for (auto& tg : g.targets) tg.weight *= scale;
    backward(p, g, grad);
  }
  return value;
}

}  // namespace detail

// Weighted masked cross-entropy on a given corrupted lattice x_t.
template <class T>
LossBreakdown masked_elbo_term_fixed(const Params<T>& p, const TokenSeq& x0, const TokenSeq& x_t,
                                     std::size_t prompt_len, double t, const NoiseSchedule& sched,
                                     std::span<T> grad = {}, double grad_scale = 1.0) {
  const double w = sched.weight(t);
  std::vector<Target> targets;
  for (std::size_t i = prompt_len; i < x_t.capacity(); ++i) {
    if (x_t[i] == p.config.mask_id) targets.push_back({static_cast<int>(i), x0[i], w});
  }
  LossBreakdown out;
  out.positions_counted = targets.size();
  out.mask_term = detail::nll_term(p, x_t, effective_time(x_t, prompt_len, sched, p.config.mask_id),
                                   std::move(targets), grad, grad_scale);
  out.total = out.mask_term;
  return out;
}

// Same, for one draw x_t ~ q_mask(. | x0, t).
// Positions before `prompt_len` are never masked.
template <class T>
LossBreakdown masked_elbo_term(const Params<T>& p, const TokenSeq& x0, std::size_t prompt_len, double t,
                               const NoiseSchedule& sched, CounterRng& rng, std::span<T> grad = {},
                               double grad_scale = 1.0) {
  const CorruptionResult r = mask_corrupt(x0, t, sched, rng, prompt_len);
  return masked_elbo_term_fixed(p, x0, r.x_t, prompt_len, t, sched, grad, grad_scale);
}

// Cross-entropy of x0 at every non-pad window position given an
// edit-corrupted lattice.
template <class T>
LossBreakdown edit_term(const Params<T>& p, const TokenSeq& x0, std::size_t prompt_len, double t,
                        const EditSchedule& edit, const NoiseSchedule& sched, CounterRng& rng,
                        std::span<T> grad = {}, double grad_scale = 1.0) {
  const CorruptionResult r = edit_corrupt(x0, t, edit, rng, prompt_len);
  std::vector<Target> targets;
  for (std::size_t i = prompt_len; i < x0.capacity(); ++i) {
    if (x0[i] != Vocab::kPad) targets.push_back({static_cast<int>(i), x0[i], 1.0});
  }
  LossBreakdown out;
  out.positions_counted = targets.size();
  out.edit_term = detail::nll_term(p, r.x_t, effective_time(r.x_t, prompt_len, sched, p.config.mask_id),
                                   std::move(targets), grad, grad_scale);
  out.total = out.edit_term;
  return out;
}

struct DiffLossConfig {
  NoiseSchedule sched;
  EditSchedule edit;
  bool include_edit = true;
};

// Mask term at t_mask plus (optionally) the edit term at t_edit.
template <class T>
LossBreakdown diff_loss_at(const Params<T>& p, const Example& ex, const DiffLossConfig& cfg, double t_mask,
                           double t_edit, CounterRng& rng, std::span<T> grad = {}, double grad_scale = 1.0) {
  LossBreakdown out = masked_elbo_term(p, ex.x0, ex.prompt_len, t_mask, cfg.sched, rng, grad, grad_scale);
  if (cfg.include_edit) {
    const LossBreakdown e = edit_term(p, ex.x0, ex.prompt_len, t_edit, cfg.edit, cfg.sched, rng, grad, grad_scale);
    out.edit_term = e.edit_term;
    out.positions_counted += e.positions_counted;
  }
  out.total = out.edit_term + out.mask_term;
  return out;
}

// Mask term and edit term with independent time draws.
template <class T>
LossBreakdown diff_loss(const Params<T>& p, const Example& ex, const DiffLossConfig& cfg, CounterRng& rng,
                        std::span<T> grad = {}, double grad_scale = 1.0) {
  const double eps = NoiseSchedule::kEps;
  const double t_mask = rng.uniform(eps, 1.0 - eps);
  const double t_edit = rng.uniform();
  return diff_loss_at(p, ex, cfg, t_mask, t_edit, rng, grad, grad_scale);
}

// Low-discrepancy times for a batch of n: one shared offset u, member b gets
// lo + (hi - lo) * (b + u) / n. Each member is still marginally U[lo, hi].
inline std::vector<double> stratified_times(std::size_t n, double u, double lo, double hi) {
  std::vector<double> t(n);
  for (std::size_t b = 0; b < n; ++b) t[b] = lo + (hi - lo) * (static_cast<double>(b) + u) / static_cast<double>(n);
  return t;
}

// p(x[pos] | revealed set) for a d-position sequence, for every reveal
// bitmask S and every position outside S.
struct ProbTable {
  int d = 0;
  std::vector<double> prob;  // [2^d x d], row S

  static constexpr int kMaxD = 6;

  explicit ProbTable(int d_) : d(d_) {
    if (d < 1) throw std::invalid_argument("ProbTable needs d >= 1");
    if (d > kMaxD) throw TooLong("enumeration bound is d <= 6");
    prob.assign((std::size_t{1} << d) * static_cast<std::size_t>(d), 1.0);
  }

  double& at(std::uint32_t revealed, int pos) { return prob[revealed * static_cast<std::size_t>(d) + pos]; }
  double at(std::uint32_t revealed, int pos) const { return prob[revealed * static_cast<std::size_t>(d) + pos]; }
};

// Average over all d! generation orders of the sequence NLL.
inline double ao_ar_nll_exact(const ProbTable& table) {
  if (table.d > ProbTable::kMaxD) throw TooLong("enumeration bound is d <= 6");
  Permutation perm;
  perm.order.resize(static_cast<std::size_t>(table.d));
  std::iota(perm.order.begin(), perm.order.end(), 0);
  double total = 0.0;
  std::size_t count = 0;
  do {
    std::uint32_t revealed = 0;
    for (int pos : perm.order) {
      total += -std::log(table.at(revealed, pos));
      revealed |= 1u << pos;
    }
    ++count;
  } while (std::next_permutation(perm.order.begin(), perm.order.end()));
  return total / static_cast<double>(count);
}

// Integral over t of (gamma'/gamma) gamma^k (1 - gamma)^(d-k): after the
// substitution g = gamma(t) this is B(k, d - k + 1) for any schedule with
// gamma(0) = 0 and gamma(1) = 1.
inline double pattern_weight(int k, int d, const NoiseSchedule& sched) {
  if (k < 1 || k > d) throw std::invalid_argument("pattern_weight: need 1 <= k <= d");
  if (std::abs(sched.eval(0.0)) > 1e-12 || std::abs(sched.eval(1.0) - 1.0) > 1e-12) {
    throw ConfigError("schedule must satisfy gamma(0) = 0 and gamma(1) = 1");
  }
  return std::exp(std::lgamma(k) + std::lgamma(d - k + 1) - std::lgamma(d + 1));
}

// E_t E_{q_mask}[ (gamma'/gamma) sum over masked -log p(x_i | x_t) ] summed
// exactly over all 2^d mask patterns with unclamped weights.
inline double elbo_exact(const ProbTable& table, const NoiseSchedule& sched) {
  const int d = table.d;
  if (d > ProbTable::kMaxD) throw TooLong("enumeration bound is d <= 6");
  const std::uint32_t full = (1u << d) - 1;
  double total = 0.0;
  for (std::uint32_t masked = 1; masked <= full; ++masked) {
    const int k = std::popcount(masked);
    const std::uint32_t revealed = full & ~masked;
    double nll = 0.0;
    for (int i = 0; i < d; ++i) {
      if (masked & (1u << i)) nll += -std::log(table.at(revealed, i));
    }
    total += pattern_weight(k, d, sched) * nll;
  }
  return total;
}

// Probability table from the denoiser: for every reveal set over the given
// positions of x, the others are masked and the model scores x at them.
template <class T>
ProbTable denoiser_prob_table(const Params<T>& p, const TokenSeq& x, const std::vector<int>& positions,
                              std::size_t prompt_len, const NoiseSchedule& sched) {
  ProbTable table(static_cast<int>(positions.size()));
  const std::uint32_t full = (1u << table.d) - 1;
  for (std::uint32_t revealed = 0; revealed < full; ++revealed) {
    TokenSeq z = x;
    for (int i = 0; i < table.d; ++i) {
      if (!(revealed & (1u << i))) z[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = p.config.mask_id;
    }
    const Mat<T> logits = forward(p, z, effective_time(z, prompt_len, sched, p.config.mask_id));
    for (int i = 0; i < table.d; ++i) {
      if (revealed & (1u << i)) continue;
      const int pos = positions[static_cast<std::size_t>(i)];
      const Target tg{pos, x[static_cast<std::size_t>(pos)], 1.0};
      table.at(revealed, i) = std::exp(-weighted_nll(logits, std::span<const Target>(&tg, 1), 1.0));
    }
  }
  return table;
}

inline double constrained_weight(const TokenSeq& x_i, TokenId mask_id = Vocab::kMask) {
  return 1.0 / static_cast<double>(std::max<std::size_t>(1, x_i.count(mask_id)));
}

// lambda(x_i) * -log p(x0 | f(x_i)) over the non-pad window of x0, where f
// applies floor(n * alpha) random edits (alpha = 0 disables it).
template <class T>
double constrained_loss(const Params<T>& p, const TokenSeq& x_i, const TokenSeq& x0, std::size_t prompt_len,
                        double alpha, const NoiseSchedule& sched, CounterRng& rng, std::span<T> grad = {},
                        double grad_scale = 1.0) {
  if (alpha < 0.0 || alpha > 0.1) throw ConfigError("augmentation rate must lie in [0, 0.1]");
  const double lambda = constrained_weight(x_i, p.config.mask_id);
  TokenSeq input = x_i;
  if (alpha > 0.0) input = edit_corrupt_count(x_i, edit_budget(x_i, alpha, prompt_len), rng, prompt_len).x_t;
  std::vector<Target> targets;
  for (std::size_t i = prompt_len; i < x0.capacity(); ++i) {
    if (x0[i] != Vocab::kPad) targets.push_back({static_cast<int>(i), x0[i], lambda});
  }
  return detail::nll_term(p, input, effective_time(input, prompt_len, sched, p.config.mask_id), std::move(targets),
                          grad, grad_scale);
}

// Mean over unordered state pairs of 1 / max(1, d_Lev).
inline double surrogate_step_loss(std::span<const TokenSeq> states) {
  if (states.size() < 2) throw std::invalid_argument("surrogate_step_loss needs >= 2 states");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t j = i + 1; j < states.size(); ++j) {
      sum += 1.0 / static_cast<double>(std::max<std::size_t>(1, levenshtein(states[i], states[j])));
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

inline double surrogate_step_loss(const Trajectory& traj) {
  return surrogate_step_loss(std::span<const TokenSeq>(traj.states));
}

// Pool ranking score: committed log-probs weighted by the ELBO time weight at
// each step's conditioning time.
inline double trajectory_elbo_score(const Trajectory& traj, const NoiseSchedule& sched) {
  double s = 0.0;
  for (const auto& st : traj.steps) {
    const double w = sched.weight(st.cond_time);
    for (const auto& c : st.commits) s += w * c.logp;
  }
  return s;
}

// Adds coeff * grad(sum of committed log-probs) of a recorded trajectory and
// returns that sum,
// recomputing each step's logits with the same block-causal layout and
// conditioning times the sampler used.
template <class T>
double trajectory_logprob_backward(const Params<T>& p, const Trajectory& traj, double temperature, double coeff,
                                   std::span<T> grad) {
  double total = 0.0;
  const int prompt_len = traj.prompt_len;
  for (std::size_t k = 0; k < traj.steps.size(); ++k) {
    const StepRecord& st = traj.steps[k];
    if (st.commits.empty()) continue;
    const TokenSeq& state = traj.states[k];
    const int end = st.end;
    std::vector<int> blocks(static_cast<std::size_t>(end));
    std::vector<double> times(static_cast<std::size_t>(end));
    for (int i = 0; i < end; ++i) {
      if (i < prompt_len) {
        blocks[static_cast<std::size_t>(i)] = 0;
        times[static_cast<std::size_t>(i)] = traj.prompt_time;
        continue;
      }
      int b = 0;
      while (traj.plan.blocks[static_cast<std::size_t>(b)].second <= i) ++b;
      blocks[static_cast<std::size_t>(i)] = b + 1;
      times[static_cast<std::size_t>(i)] = b == st.block ? st.cond_time : traj.block_commit_times[static_cast<std::size_t>(b)];
    }
    LossGraph<T> g;
    g.tape = forward_tape(p, std::span<const TokenId>(state.ids.data(), static_cast<std::size_t>(end)),
                          std::span<const double>(times), std::span<const int>(blocks));
    // The sampler never draws [PAD]; score the same renormalised distribution.
    g.tape.logits.col(Vocab::kPad).setConstant(-std::numeric_limits<T>::infinity());
    g.temperature = temperature;
    for (const auto& c : st.commits) g.targets.push_back({c.position, c.token, 1.0});
    total -= g.value();
    if (coeff != 0.0 && !grad.empty()) {
      // d/dtheta of sum(-w log p) with w = -coeff is coeff * grad log p.
      for (auto& tg : g.targets) tg.weight = -coeff;
      backward(p, g, grad);
    }
  }
  return total;
}

// Running mean of past objective values.
struct RunningBaseline {
  double mean = 0.0;
  std::size_t count = 0;

  double value() const { return mean; }
  void update(double x) {
    ++count;
    mean += (x - mean) / static_cast<double>(count);
  }
};

struct OnPolicyConfig {
  double beta = 5.0;
  SampleConfig sample;
  NoiseSchedule sched;
};

struct OnPolicySample {
  double objective = 0.0;
  double surrogate = 0.0;
  double advantage = 0.0;
  int verdict = 0;
  Trajectory trajectory;
};

// Samples a trajectory, scores surrogate - beta * V(final), and adds the
// score-function gradient (objective - baseline) * grad log p(tau) into
// `grad` (scaled by grad_scale). The baseline is updated afterwards.
template <class T>
OnPolicySample onpolicy_objective(const Params<T>& p, const ProgramSample& prompt, const Verifier& verifier,
                                  const OnPolicyConfig& cfg, RunningBaseline& baseline, CounterRng& rng,
                                  std::span<T> grad = {}, double grad_scale = 1.0) {
  OnPolicySample out;
  out.trajectory = sample_prompt(p, prompt, cfg.sample, cfg.sched, rng);
  out.verdict = verifier.score(out.trajectory.final_state());
  out.surrogate = out.trajectory.states.size() >= 2 ? surrogate_step_loss(out.trajectory) : 0.0;
  out.objective = out.surrogate - cfg.beta * out.verdict;
  out.advantage = out.objective - baseline.value();
  if (!grad.empty() && out.advantage != 0.0) {
    trajectory_logprob_backward(p, out.trajectory, cfg.sample.temperature, grad_scale * out.advantage, grad);
  }
  baseline.update(out.objective);
  return out;
}

}  // namespace ddlm
