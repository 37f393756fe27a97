#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "optimizer.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "schedule.hpp"
#include "verifier.hpp"

namespace ddlm {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline void check_finite(std::span<const float> grad) {
  for (float g : grad) {
    if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient");
  }
}

}  // namespace detail

// ---- two-stage curriculum ------------------------------------------------

struct CurriculumConfig {
  std::uint64_t total_steps = 2000;
  double mask_only_fraction = 0.8;
  int batch_size = 64;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  NoiseSchedule sched;
  EditSchedule edit;
  std::uint64_t log_every = 10;

  void validate() const {
    if (total_steps < 1) throw ConfigError("curriculum: total_steps must be >= 1");
    if (!(mask_only_fraction > 0.0 && mask_only_fraction <= 1.0)) {
      throw ConfigError("curriculum: mask_only_fraction must lie in (0, 1]");
    }
    if (batch_size < 1) throw ConfigError("curriculum: batch_size must be >= 1");
    if (log_every < 1) throw ConfigError("curriculum: log_every must be >= 1");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("curriculum: learning_rate must be > 0");
  }

  std::uint64_t boundary() const {
    return static_cast<std::uint64_t>(std::floor(static_cast<double>(total_steps) * mask_only_fraction));
  }
};

struct TrainLogRow {
  std::uint64_t step = 0;
  int phase = 1;
  double loss_total = 0, loss_edit = 0, loss_mask = 0;
};

struct TrainResult {
  DenoiserParams params;
  OptimizerState optimizer;
  std::vector<TrainLogRow> log;
};

inline void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& rows) {
  os << "step,phase,loss_total,loss_edit,loss_mask\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.phase << ',' << detail::fmt_double(r.loss_total) << ','
       << detail::fmt_double(r.loss_edit) << ',' << detail::fmt_double(r.loss_mask) << '\n';
  }
}

// Mean per-sequence L_diff on a fixed set with a fixed seed; used to compare
// checkpoints without batch noise.
inline LossBreakdown eval_diff_loss(const DenoiserParams& p, const std::vector<Example>& examples,
                                    const DiffLossConfig& cfg, std::uint64_t seed, int draws = 4) {
  LossBreakdown acc;
  const CounterRng base(seed, 0xE7A1);
  std::size_t n = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (int d = 0; d < draws; ++d) {
      CounterRng rng = base.fork(i * 1024 + static_cast<std::size_t>(d));
      const LossBreakdown b = diff_loss(p, examples[i], cfg, rng);
      acc.total += b.total;
      acc.edit_term += b.edit_term;
      acc.mask_term += b.mask_term;
      ++n;
    }
  }
  const double k = n ? 1.0 / static_cast<double>(n) : 0.0;
  acc.total *= k;
  acc.edit_term *= k;
  acc.mask_term *= k;
  return acc;
}

struct TrainHooks {
  // Called after every logged step.
  std::function<void(const TrainLogRow&)> on_log;
  // Where the last good parameters go if training diverges.
  std::string last_good_path;
  // Stop after this many steps of the schedule (for resumption tests);
  // 0 runs to total_steps.
  std::uint64_t stop_after = 0;
};

// Mask-only training for steps < boundary, then mask + edit terms. The batch
// of step s depends only on (seed, s), so resuming from a checkpoint taken at
// step s reproduces the uninterrupted run exactly.
inline TrainResult train_tsc(const ModelConfig& model, const CurriculumConfig& cfg,
                             const std::vector<Example>& corpus, const TrainHooks& hooks = {},
                             const std::optional<Checkpoint>& resume = std::nullopt) {
  cfg.validate();
  model.validate();
  if (corpus.empty()) throw ConfigError("train_tsc: empty corpus");
  TrainResult out{resume ? resume->params : DenoiserParams::init(model, cfg.seed), {}, {}};
  RmsOptimizer opt = resume && resume->optimizer ? RmsOptimizer(cfg.optimizer, *resume->optimizer)
                                                 : RmsOptimizer(cfg.optimizer, out.params.size());
  const std::uint64_t boundary = cfg.boundary();
  const std::uint64_t end =
      hooks.stop_after ? std::min(cfg.total_steps, hooks.stop_after) : cfg.total_steps;
  AlignedVector<float> grad(out.params.size());
  const double scale = 1.0 / cfg.batch_size;
  for (std::uint64_t step = opt.steps_taken(); step < end; ++step) {
    CounterRng rng(cfg.seed, step + 1);
    DiffLossConfig lc{cfg.sched, cfg.edit, step >= boundary};
    std::fill(grad.begin(), grad.end(), 0.0f);
    TrainLogRow row;
    row.step = step;
    row.phase = lc.include_edit ? 2 : 1;
    const double eps = NoiseSchedule::kEps;
    const auto t_mask = stratified_times(static_cast<std::size_t>(cfg.batch_size), rng.uniform(), eps, 1.0 - eps);
    const auto t_edit = stratified_times(static_cast<std::size_t>(cfg.batch_size), rng.uniform(), 0.0, 1.0);
    bool finite = true;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const Example& ex = corpus[rng.below(corpus.size())];
        CounterRng item = rng.fork(static_cast<std::uint64_t>(b));
        const auto bi = static_cast<std::size_t>(b);
        const LossBreakdown l =
            diff_loss_at(out.params, ex, lc, t_mask[bi], t_edit[bi], item, std::span<float>(grad), scale);
        row.loss_total += l.total * scale;
        row.loss_edit += l.edit_term * scale;
        row.loss_mask += l.mask_term * scale;
      }
      finite = std::isfinite(row.loss_total);
      if (finite) detail::check_finite(grad);
    } catch (const NonFiniteActivation&) {
      finite = false;
    } catch (const NonFiniteGradient&) {
      finite = false;
    }
    if (!finite) {
      if (!hooks.last_good_path.empty()) save_checkpoint(hooks.last_good_path, out.params, opt.state());
      throw DivergenceDetected("non-finite loss at step " + std::to_string(step), hooks.last_good_path);
    }
    opt.step(std::span<float>(out.params.values), std::span<const float>(grad),
             lr_at(cfg.optimizer, step, cfg.total_steps));
    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      out.log.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
    }
  }
  out.optimizer = opt.state();
  return out;
}

// ---- constrained-order distillation ---------------------------------------

struct Candidate {
  Trajectory trajectory;
  double score = 0.0;
  std::size_t index = 0;
};

struct PoolEntry {
  std::size_t sample = 0;  // index into the corpus
  std::vector<Candidate> candidates;
  std::vector<std::size_t> kept;  // indices into candidates, best first
};

struct TrajectoryPool {
  int pool_size = 8;  // G
  int keep_top = 2;   // m
  std::vector<PoolEntry> entries;
};

// Indices of the m largest scores, ties broken by lower index.
inline std::vector<std::size_t> select_top(const std::vector<double>& scores, int m) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(m, 0))));
  return idx;
}

struct DistillConfig {
  int pool_size = 8;
  int keep_top = 2;
  std::size_t samples = 256;  // corpus samples used to build the pool
  SampleConfig sample;        // unmask_rule is forced to random
  double augment_alpha = 0.1;
  std::uint64_t finetune_steps = 300;
  int batch_size = 16;
  OptimizerConfig optimizer{1e-3, 0.1, 20, 0.999, 1e-8};
  std::uint64_t seed = 0;
  NoiseSchedule sched;

  void validate() const {
    if (pool_size < 1) throw ConfigError("distill: G must be >= 1");
    if (keep_top < 1 || keep_top > pool_size) throw ConfigError("distill: m must lie in [1, G]");
    if (batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
    if (augment_alpha < 0.0 || augment_alpha > 0.1) throw ConfigError("distill: augment_alpha must lie in [0, 0.1]");
    sample.validate();
  }
};

struct DistillResult {
  TrajectoryPool pool;
  DenoiserParams params;
  std::vector<double> finetune_loss;  // per step, batch mean
};

inline TrajectoryPool build_pool(const DenoiserParams& p, const std::vector<ProgramSample>& corpus,
                                 const DistillConfig& cfg) {
  TrajectoryPool pool;
  pool.pool_size = cfg.pool_size;
  pool.keep_top = cfg.keep_top;
  SampleConfig sc = cfg.sample;
  sc.unmask_rule = UnmaskRule::random;
  const CounterRng base(cfg.seed, 0x9001);
  const std::size_t n = std::min(cfg.samples, corpus.size());
  for (std::size_t i = 0; i < n; ++i) {
    PoolEntry e;
    e.sample = i;
    std::vector<double> scores;
    for (int g = 0; g < cfg.pool_size; ++g) {
      CounterRng rng = base.fork(i * 4096 + static_cast<std::size_t>(g));
      Candidate c;
      c.trajectory = sample_prompt(p, corpus[i], sc, cfg.sched, rng);
      c.score = trajectory_elbo_score(c.trajectory, cfg.sched);
      c.index = static_cast<std::size_t>(g);
      scores.push_back(c.score);
      e.candidates.push_back(std::move(c));
    }
    e.kept = select_top(scores, cfg.keep_top);
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

// Builds the pool from `p`, then fine-tunes a copy of `p` on (x_i, x0) pairs
// from the kept trajectories with the constrained loss. x0 is the corpus
// ground truth for the prompt.
inline DistillResult distill_trajectories(const DenoiserParams& p, const std::vector<ProgramSample>& corpus,
                                          const DistillConfig& cfg, const Vocab& vocab = Vocab::standard()) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("distill: empty corpus");
  DistillResult out{build_pool(p, corpus, cfg), p, {}};
  struct Pair {
    const TokenSeq* x_i;
    std::size_t sample;
  };
  std::vector<Pair> pairs;
  std::vector<Example> truth(corpus.size());
  for (const auto& e : out.pool.entries) {
    truth[e.sample] = make_example(vocab, corpus[e.sample], static_cast<std::size_t>(p.config.max_len));
    for (std::size_t k : e.kept) {
      const auto& states = e.candidates[k].trajectory.states;
      for (std::size_t s = 0; s + 1 < states.size(); ++s) pairs.push_back({&states[s], e.sample});
    }
  }
  if (pairs.empty() || cfg.finetune_steps == 0) return out;
  RmsOptimizer opt(cfg.optimizer, out.params.size());
  AlignedVector<float> grad(out.params.size());
  const double scale = 1.0 / cfg.batch_size;
  for (std::uint64_t step = 0; step < cfg.finetune_steps; ++step) {
    CounterRng rng(cfg.seed ^ 0xD157111ULL, step + 1);
    std::fill(grad.begin(), grad.end(), 0.0f);
    double loss = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Pair& pr = pairs[rng.below(pairs.size())];
      const Example& ex = truth[pr.sample];
      CounterRng item = rng.fork(static_cast<std::uint64_t>(b));
      loss += scale * constrained_loss(out.params, *pr.x_i, ex.x0, ex.prompt_len, cfg.augment_alpha, cfg.sched,
                                       item, std::span<float>(grad), scale);
    }
    if (!std::isfinite(loss)) throw DivergenceDetected("non-finite distillation loss", "");
    detail::check_finite(grad);
    opt.step(std::span<float>(out.params.values), std::span<const float>(grad),
             lr_at(cfg.optimizer, step, cfg.finetune_steps));
    out.finetune_loss.push_back(loss);
  }
  return out;
}

// ---- on-policy step reduction ---------------------------------------------

struct OnPolicyTrainConfig {
  int updates = 100;
  int rollouts_per_update = 8;
  double beta = 5.0;
  SampleConfig sample;  // block size, temperature, threshold; fractions set by the ramp
  // Per-step unmask fraction target, ramped linearly over the updates.
  double fraction_start = 0.25;
  double fraction_end = 0.5;
  // Masked positions at or above this confidence are committed early, so
  // easy stretches (the [EOS] tail) can finish a block in fewer steps.
  double confidence_threshold = 0.9;
  OptimizerConfig optimizer{5e-4, 1.0, 0, 0.999, 1e-8};
  std::uint64_t seed = 0;
  NoiseSchedule sched;
  int eval_every = 10;
  std::size_t eval_prompts = 100;
  int collapse_window = 50;

  void validate() const {
    if (updates < 0) throw ConfigError("onpolicy: updates must be >= 0");
    if (rollouts_per_update < 1) throw ConfigError("onpolicy: rollouts_per_update must be >= 1");
    if (!(fraction_start > 0.0 && fraction_start <= 1.0 && fraction_end > 0.0 && fraction_end <= 1.0)) {
      throw ConfigError("onpolicy: unmask fractions must lie in (0, 1]");
    }
    if (eval_every < 1) throw ConfigError("onpolicy: eval_every must be >= 1");
    if (beta < 0.0) throw ConfigError("onpolicy: beta must be >= 0");
    if (!(confidence_threshold > 0.0)) throw ConfigError("onpolicy: confidence_threshold must be > 0");
    sample.validate();
  }

  SampleConfig sample_at(int update) const {
    SampleConfig sc = sample;
    const double u = updates > 1 ? static_cast<double>(update) / (updates - 1) : 1.0;
    sc.unmask_fractions = uniform_fractions(fraction_start + (fraction_end - fraction_start) * std::clamp(u, 0.0, 1.0));
    sc.steps_per_block = static_cast<int>(sc.unmask_fractions.size());
    sc.confidence_threshold = confidence_threshold;
    return sc;
  }
};

struct OnPolicyLogRow {
  int update = 0;
  double mean_steps = 0.0;
  double pass_rate = 0.0;
  // Window tokens per reverse step: throughput relative to the one-token-
  // per-step limit when every step costs the same.
  double speedup_ratio = 0.0;
};

struct OnPolicyResult {
  DenoiserParams params;
  std::vector<OnPolicyLogRow> log;
};

inline void write_onpolicy_log(std::ostream& os, const std::vector<OnPolicyLogRow>& rows) {
  os << "update,mean_steps,pass_rate,speedup_ratio\n";
  for (const auto& r : rows) {
    os << r.update << ',' << detail::fmt_double(r.mean_steps) << ',' << detail::fmt_double(r.pass_rate) << ','
       << detail::fmt_double(r.speedup_ratio) << '\n';
  }
}

inline std::vector<OnPolicyLogRow> read_onpolicy_log(std::istream& is) {
  std::vector<OnPolicyLogRow> rows;
  std::string line;
  bool got = false;
  while ((got = static_cast<bool>(std::getline(is, line))) && !line.empty() && line[0] == '#') {
  }
  if (!got) throw MissingLog("on-policy log is empty");
  if (line != "update,mean_steps,pass_rate,speedup_ratio") throw ParseError("unexpected on-policy log header");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    OnPolicyLogRow r;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ls >> r.update >> c1 >> r.mean_steps >> c2 >> r.pass_rate >> c3 >> r.speedup_ratio) || c1 != ',' ||
        c2 != ',' || c3 != ',') {
      throw ParseError("on-policy log line " + std::to_string(lineno) + " is malformed");
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw MissingLog("on-policy log has no rows");
  return rows;
}

inline OnPolicyLogRow onpolicy_eval_row(const DenoiserParams& p, const std::vector<ProgramSample>& prompts,
                                        const SampleConfig& sc, const NoiseSchedule& sched, std::uint64_t seed,
                                        int update, const Verifier& verifier) {
  const EvalStats st = evaluate_prompts(p, prompts, sc, sched, seed, verifier);
  OnPolicyLogRow row;
  row.update = update;
  row.mean_steps = st.mean_steps;
  row.pass_rate = st.pass_rate;
  const double window = static_cast<double>(st.generated_tokens) / static_cast<double>(prompts.size());
  row.speedup_ratio = st.mean_steps > 0 ? window / st.mean_steps : 0.0;
  return row;
}

// REINFORCE on surrogate - beta * V with a running-mean baseline while the
// per-step unmask fraction is ramped up. Rows are logged at update 0, every
// eval_every updates and after the last update, on a fixed prompt set with a
// fixed seed.
inline OnPolicyResult train_onpolicy(const DenoiserParams& p, const std::vector<ProgramSample>& corpus,
                                     const std::vector<ProgramSample>& eval_prompts, const Verifier& verifier,
                                     const OnPolicyTrainConfig& cfg,
                                     const std::function<void(const OnPolicyLogRow&)>& on_log = {}) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("onpolicy: empty corpus");
  OnPolicyResult out{p, {}};
  if (cfg.updates == 0) return out;
  std::vector<ProgramSample> evals(eval_prompts.begin(),
                                   eval_prompts.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(cfg.eval_prompts, eval_prompts.size())));
  const std::uint64_t eval_seed = cfg.seed ^ 0xE7A15EEDULL;
  auto log_row = [&](int update, const SampleConfig& sc) {
    if (evals.empty()) return;
    out.log.push_back(onpolicy_eval_row(out.params, evals, sc, cfg.sched, eval_seed, update, verifier));
    if (on_log) on_log(out.log.back());
  };
  log_row(0, cfg.sample_at(0));
  const double start_pass = out.log.empty() ? 1.0 : out.log.front().pass_rate;

  RmsOptimizer opt(cfg.optimizer, out.params.size());
  RunningBaseline baseline;
  AlignedVector<float> grad(out.params.size());
  const double scale = 1.0 / cfg.rollouts_per_update;
  int below = 0;
  for (int u = 0; u < cfg.updates; ++u) {
    OnPolicyConfig oc;
    oc.beta = cfg.beta;
    oc.sample = cfg.sample_at(u);
    oc.sched = cfg.sched;
    CounterRng rng(cfg.seed, static_cast<std::uint64_t>(u) + 1);
    std::fill(grad.begin(), grad.end(), 0.0f);
    int passed = 0;
    for (int r = 0; r < cfg.rollouts_per_update; ++r) {
      const ProgramSample& prompt = corpus[rng.below(corpus.size())];
      CounterRng item = rng.fork(static_cast<std::uint64_t>(r));
      const OnPolicySample s = onpolicy_objective(out.params, prompt, verifier, oc, baseline, item,
                                                  std::span<float>(grad), scale);
      passed += s.verdict;
    }
    detail::check_finite(grad);
    opt.step(std::span<float>(out.params.values), std::span<const float>(grad),
             lr_at(cfg.optimizer, static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(cfg.updates)));
    const double batch_pass = static_cast<double>(passed) / cfg.rollouts_per_update;
    below = batch_pass < 0.5 * start_pass ? below + 1 : 0;
    if (below >= cfg.collapse_window) {
      throw CollapseDetected("pass rate below half its starting value for " + std::to_string(below) +
                             " consecutive updates");
    }
    if ((u + 1) % cfg.eval_every == 0 || u + 1 == cfg.updates) log_row(u + 1, cfg.sample_at(u));
  }
  return out;
}

}  // namespace ddlm
