#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bench_record.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "verifier.hpp"
#include "vocab.hpp"

namespace ddlm {

// Partition of the generation window [window_begin, window_end) into
// consecutive blocks of at most block_size positions.
struct BlockPlan {
  int block_size = 16;
  std::vector<std::pair<int, int>> blocks;

  static BlockPlan make(int window_begin, int window_end, int b) {
    if (b < 1) throw ConfigError("block size must be >= 1");
    if (window_begin > window_end) throw ConfigError("empty generation window");
    BlockPlan plan;
    plan.block_size = b;
    for (int s = window_begin; s < window_end; s += b) plan.blocks.emplace_back(s, std::min(window_end, s + b));
    return plan;
  }

  int window_begin() const { return blocks.empty() ? 0 : blocks.front().first; }
  int window_end() const { return blocks.empty() ? 0 : blocks.back().second; }
};

enum class UnmaskRule { confidence_topk, random };

struct SampleConfig {
  int block_size = 16;
  int steps_per_block = 4;  // K_b
  double temperature = 1.0;
  UnmaskRule unmask_rule = UnmaskRule::confidence_topk;
  // Fraction of a block committed at each step; empty means "derived from
  // the noise schedule over steps_per_block uniform time steps".
  std::vector<double> unmask_fractions;
  // Masked positions whose confidence reaches this value are committed in
  // the same step even beyond the scheduled count. Values > 1 disable it.
  double confidence_threshold = 2.0;
  bool allow_edit_revision = false;
  double revision_threshold = 0.05;
  bool use_cache = true;

  void validate() const {
    if (block_size < 1) throw ConfigError("sampler: block_size must be >= 1");
    if (steps_per_block < 1) throw ConfigError("sampler: steps_per_block must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("sampler: temperature must be > 0");
    if (!unmask_fractions.empty()) {
      const double sum = std::accumulate(unmask_fractions.begin(), unmask_fractions.end(), 0.0);
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("sampler: unmask fractions must sum to 1");
      for (double f : unmask_fractions) {
        if (f < 0.0) throw ConfigError("sampler: negative unmask fraction");
      }
    }
  }
};

// Per-step fractions for a constant target fraction f: ceil(1/f) steps, the
// last one taking the remainder.
inline std::vector<double> uniform_fractions(double f) {
  f = std::clamp(f, 1e-6, 1.0);
  const int n = static_cast<int>(std::ceil(1.0 / f - 1e-9));
  std::vector<double> out(static_cast<std::size_t>(n), f);
  out.back() = 1.0 - f * (n - 1);
  return out;
}

// Fractions implied by the schedule: step j of K moves block-local time from
// 1 - j/K to 1 - (j+1)/K and commits gamma(t) - gamma(s) of the block.
inline std::vector<double> step_fractions(const SampleConfig& cfg, const NoiseSchedule& sched) {
  if (!cfg.unmask_fractions.empty()) return cfg.unmask_fractions;
  const int K = cfg.steps_per_block;
  std::vector<double> out;
  for (int j = 0; j < K; ++j) {
    const double t = 1.0 - static_cast<double>(j) / K;
    const double s = j + 1 == K ? 0.0 : 1.0 - static_cast<double>(j + 1) / K;
    out.push_back(sched.eval(t) - sched.eval(s));
  }
  return out;
}

struct StepCommit {
  int position = 0;
  TokenId token = 0;
  double logp = 0.0;
  bool revision = false;
};

struct StepRecord {
  int block = 0;
  int begin = 0, end = 0;
  double t = 1.0, s = 0.0;   // block-local schedule times
  double cond_time = 1.0;    // conditioning time fed to the denoiser
  std::vector<StepCommit> commits;
};

// tau[K] .. tau[0] stored chronologically: states.front() is the all-mask
// window, states.back() the final sample. steps[k] maps states[k] to
// states[k + 1].
struct Trajectory {
  std::vector<TokenSeq> states;
  std::vector<StepRecord> steps;
  BlockPlan plan;
  int prompt_len = 0;
  double prompt_time = 1.0;
  std::vector<double> block_commit_times;

  std::size_t step_count() const { return steps.size(); }
  const TokenSeq& final_state() const { return states.back(); }

  double total_logprob() const {
    double s = 0;
    for (const auto& st : steps) {
      for (const auto& c : st.commits) s += c.logp;
    }
    return s;
  }
};

// Conditioning time for a lattice whose window has `masked` of `window`
// positions masked.
inline double conditioning_time(std::size_t masked, std::size_t window, const NoiseSchedule& sched) {
  if (window == 0) return 0.0;
  return sched.inverse(static_cast<double>(masked) / static_cast<double>(window));
}

// Denoiser backed by the KV cache: the prompt and every finished block are
// committed once and reused.
class CachedDenoiser {
 public:
  explicit CachedDenoiser(const DenoiserParams& p) : p_(p), cache_(p.config) {}

  void start(const TokenSeq& state, int prompt_len, double t) {
    cache_.reset(p_.config);
    if (prompt_len > 0) commit(state, 0, prompt_len, t);
  }

  Mat<float> logits(const TokenSeq& state, int begin, int end, double t) {
    if (begin != cache_.committed_len) throw CacheOverflow("block does not follow the committed prefix");
    if (!masked_rows_only_) return forward_cached(p_, cache_, span(state, begin, end), t);
    rows_.clear();
    for (int i = begin; i < end; ++i) {
      if (state[static_cast<std::size_t>(i)] == p_.config.mask_id) rows_.push_back(i - begin);
    }
    if (rows_.empty()) return forward_cached(p_, cache_, span(state, begin, end), t);
    return forward_cached_rows(p_, cache_, span(state, begin, end), t, std::span<const int>(rows_));
  }

  // When set, logits of unmasked block rows are not computed (left at zero).
  void set_masked_rows_only(bool on) { masked_rows_only_ = on; }

  void commit(const TokenSeq& state, int begin, int end, double t) {
    commit_block(p_, cache_, span(state, begin, end), t);
  }

  const KVCache<float>& cache() const { return cache_; }

 private:
  static std::span<const TokenId> span(const TokenSeq& s, int b, int e) {
    return {s.ids.data() + b, static_cast<std::size_t>(e - b)};
  }
  const DenoiserParams& p_;
  KVCache<float> cache_;
  bool masked_rows_only_ = false;
  std::vector<int> rows_;
};

// Recompute oracle: every call runs a full block-causal forward over the
// prefix from scratch.
class RecomputeDenoiser {
 public:
  explicit RecomputeDenoiser(const DenoiserParams& p) : p_(p) {}

  void start(const TokenSeq&, int prompt_len, double t) {
    blocks_.assign(static_cast<std::size_t>(prompt_len), 0);
    times_.assign(static_cast<std::size_t>(prompt_len), t);
    next_block_ = prompt_len > 0 ? 1 : 0;
  }

  Mat<float> logits(const TokenSeq& state, int begin, int end, double t) {
    if (end > p_.config.max_len) throw CacheOverflow("block exceeds max_len");
    auto blocks = blocks_;
    auto times = times_;
    blocks.resize(static_cast<std::size_t>(begin), next_block_);
    times.resize(static_cast<std::size_t>(begin), t);
    blocks.resize(static_cast<std::size_t>(end), next_block_);
    times.resize(static_cast<std::size_t>(end), t);
    const std::span<const TokenId> toks(state.ids.data(), static_cast<std::size_t>(end));
    const auto tape = forward_tape(p_, toks, std::span<const double>(times), std::span<const int>(blocks));
    return tape.logits.bottomRows(end - begin);
  }

  void commit(const TokenSeq&, int begin, int end, double t) {
    blocks_.resize(static_cast<std::size_t>(begin), next_block_);
    times_.resize(static_cast<std::size_t>(begin), t);
    blocks_.resize(static_cast<std::size_t>(end), next_block_);
    times_.resize(static_cast<std::size_t>(end), t);
    ++next_block_;
  }

 private:
  const DenoiserParams& p_;
  std::vector<int> blocks_;
  std::vector<double> times_;
  int next_block_ = 0;
};

namespace detail {

struct RowDist {
  std::vector<double> prob;
  double confidence = 0.0;
  TokenId argmax = 0;
};

// Softmax of one logit row at the given temperature. [PAD] is never
// generated: the window is always filled with real tokens or [EOS].
inline RowDist row_distribution(const Mat<float>& logits, int row, double temperature) {
  RowDist d;
  const auto V = logits.cols();
  d.prob.resize(static_cast<std::size_t>(V));
  double mx = -INFINITY;
  for (Eigen::Index j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(logits(row, j)) / temperature);
  double sum = 0;
  for (Eigen::Index j = 0; j < V; ++j) {
    const double z = static_cast<double>(logits(row, j)) / temperature;
    const double e = std::isinf(z) || j == Vocab::kPad ? 0.0 : std::exp(z - mx);
    d.prob[static_cast<std::size_t>(j)] = e;
    sum += e;
  }
  for (Eigen::Index j = 0; j < V; ++j) {
    auto& p = d.prob[static_cast<std::size_t>(j)];
    p /= sum;
    if (p > d.confidence) {
      d.confidence = p;
      d.argmax = static_cast<TokenId>(j);
    }
  }
  return d;
}

inline TokenId sample_from(const std::vector<double>& prob, CounterRng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  TokenId last = 0;
  for (std::size_t j = 0; j < prob.size(); ++j) {
    if (prob[j] <= 0.0) continue;
    acc += prob[j];
    last = static_cast<TokenId>(j);
    if (u < acc) return last;
  }
  return last;
}

}  // namespace detail

// One reverse step on block [begin, end) given the block's logits. Commits
// `k` masked positions (most confident first, or uniformly random), plus any
// masked position above the confidence threshold, then optionally revises
// the least likely earlier commit of the block.
inline StepRecord reverse_step_from_logits(const Mat<float>& block_logits, TokenSeq& state, int begin, int end,
                                           int prompt_len, int k, const SampleConfig& cfg, CounterRng& rng,
                                           TokenId mask_id = Vocab::kMask) {
  std::vector<int> masked;
  for (int i = begin; i < end; ++i) {
    if (state[static_cast<std::size_t>(i)] == mask_id) masked.push_back(i);
  }
  if (masked.empty()) throw NoMaskedPositions("reverse step on a block without masks");
  k = std::clamp(k, 1, static_cast<int>(masked.size()));

  // Unmasked rows are only read when revising earlier commits.
  std::vector<detail::RowDist> dist(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) {
    if (cfg.allow_edit_revision || state[static_cast<std::size_t>(i)] == mask_id) {
      dist[static_cast<std::size_t>(i - begin)] = detail::row_distribution(block_logits, i - begin, cfg.temperature);
    }
  }

  std::vector<int> order = masked;
  if (cfg.unmask_rule == UnmaskRule::random) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  } else {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return dist[static_cast<std::size_t>(a - begin)].confidence > dist[static_cast<std::size_t>(b - begin)].confidence;
    });
  }
  std::vector<int> chosen(order.begin(), order.begin() + k);
  if (cfg.confidence_threshold <= 1.0) {
    for (std::size_t i = static_cast<std::size_t>(k); i < order.size(); ++i) {
      if (dist[static_cast<std::size_t>(order[i] - begin)].confidence >= cfg.confidence_threshold) {
        chosen.push_back(order[i]);
      }
    }
  }
  std::sort(chosen.begin(), chosen.end());

  StepRecord rec;
  rec.begin = begin;
  rec.end = end;
  for (int pos : chosen) {
    const auto& d = dist[static_cast<std::size_t>(pos - begin)];
    const TokenId tok = detail::sample_from(d.prob, rng);
    state[static_cast<std::size_t>(pos)] = tok;
    rec.commits.push_back({pos, tok, std::log(d.prob[static_cast<std::size_t>(tok)]), false});
  }

  if (cfg.allow_edit_revision) {
    int worst = -1;
    double worst_p = cfg.revision_threshold;
    for (int i = std::max(begin, prompt_len); i < end; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      const TokenId cur = state[static_cast<std::size_t>(i)];
      if (cur == mask_id) continue;
      const double p = dist[static_cast<std::size_t>(i - begin)].prob[static_cast<std::size_t>(cur)];
      if (p < worst_p) {
        worst_p = p;
        worst = i;
      }
    }
    if (worst >= 0) {
      const auto& d = dist[static_cast<std::size_t>(worst - begin)];
      const TokenId tok = detail::sample_from(d.prob, rng);
      state[static_cast<std::size_t>(worst)] = tok;
      rec.commits.push_back({worst, tok, std::log(d.prob[static_cast<std::size_t>(tok)]), true});
    }
  }
  return rec;
}

// Number of positions to commit at step j of a block of length n with m
// positions still masked, following cumulative fractions.
inline int scheduled_count(const std::vector<double>& fractions, int j, int n, int m) {
  double cum = 0;
  for (int i = 0; i <= j && i < static_cast<int>(fractions.size()); ++i) cum += fractions[static_cast<std::size_t>(i)];
  int target = j + 1 >= static_cast<int>(fractions.size()) ? n : static_cast<int>(std::lround(cum * n));
  target = std::min(target, n);
  return std::max(1, target - (n - m));
}

// Blockwise reverse process over the window of `start` (prompt followed by
// masked positions). Blocks are generated left to right; each runs up to
// K_b steps and is committed before the next one starts.
template <class Denoiser>
Trajectory sample_blockwise(Denoiser& den, const TokenSeq& start, int prompt_len, const BlockPlan& plan,
                            const SampleConfig& cfg, const NoiseSchedule& sched, CounterRng& rng,
                            TokenId mask_id = Vocab::kMask) {
  cfg.validate();
  Trajectory tr;
  tr.plan = plan;
  tr.prompt_len = prompt_len;
  TokenSeq state = start;
  const int wb = plan.window_begin();
  const int we = plan.window_end();
  if (wb < prompt_len || we > static_cast<int>(state.capacity())) {
    throw CacheOverflow("generation window exceeds the lattice");
  }
  for (int i = wb; i < we; ++i) state[static_cast<std::size_t>(i)] = mask_id;
  const std::size_t window = static_cast<std::size_t>(we - wb);
  auto masked_in_window = [&]() {
    return static_cast<std::size_t>(std::count(state.ids.begin() + wb, state.ids.begin() + we, mask_id));
  };
  tr.prompt_time = conditioning_time(masked_in_window(), window, sched);
  if constexpr (requires { den.set_masked_rows_only(true); }) den.set_masked_rows_only(!cfg.allow_edit_revision);
  den.start(state, prompt_len, tr.prompt_time);
  tr.states.push_back(state);

  const auto fractions = step_fractions(cfg, sched);
  const int K = static_cast<int>(fractions.size());
  for (std::size_t bi = 0; bi < plan.blocks.size(); ++bi) {
    const auto [begin, end] = plan.blocks[bi];
    const int n = end - begin;
    for (int j = 0; j < K; ++j) {
      const int m = static_cast<int>(std::count(state.ids.begin() + begin, state.ids.begin() + end, mask_id));
      if (m == 0) break;
      const double cond = conditioning_time(masked_in_window(), window, sched);
      const auto logits = den.logits(state, begin, end, cond);
      const int k = scheduled_count(fractions, j, n, m);
      StepRecord rec = reverse_step_from_logits(logits, state, begin, end, prompt_len, k, cfg, rng, mask_id);
      rec.block = static_cast<int>(bi);
      rec.t = 1.0 - static_cast<double>(j) / K;
      rec.s = 1.0 - static_cast<double>(j + 1) / K;
      rec.cond_time = cond;
      tr.steps.push_back(std::move(rec));
      tr.states.push_back(state);
    }
    const double commit_t = conditioning_time(masked_in_window(), window, sched);
    tr.block_commit_times.push_back(commit_t);
    if (bi + 1 < plan.blocks.size()) den.commit(state, begin, end, commit_t);
  }
  return tr;
}

inline Trajectory sample_blockwise(const DenoiserParams& p, const TokenSeq& start, int prompt_len,
                                   const BlockPlan& plan, const SampleConfig& cfg, const NoiseSchedule& sched,
                                   CounterRng& rng) {
  if (cfg.use_cache) {
    CachedDenoiser den(p);
    return sample_blockwise(den, start, prompt_len, plan, cfg, sched, rng, p.config.mask_id);
  }
  RecomputeDenoiser den(p);
  return sample_blockwise(den, start, prompt_len, plan, cfg, sched, rng, p.config.mask_id);
}

// Samples a completion for a corpus prompt; the window is everything after
// the prompt up to max_len.
inline Trajectory sample_prompt(const DenoiserParams& p, const ProgramSample& prompt, const SampleConfig& cfg,
                                const NoiseSchedule& sched, CounterRng& rng, const Vocab& vocab = Vocab::standard()) {
  const int L = p.config.max_len;
  const TokenSeq start = prompt_lattice(vocab, prompt, static_cast<std::size_t>(L));
  const int prompt_len = static_cast<int>(prompt.prompt.size()) + 1;
  const BlockPlan plan = BlockPlan::make(prompt_len, L, cfg.block_size);
  return sample_blockwise(p, start, prompt_len, plan, cfg, sched, rng);
}

// A standalone reverse step from t to s on block [begin, end), computing the
// logits with a block-causal recompute (prompt as its own block).
inline TokenSeq reverse_step(const DenoiserParams& p, const TokenSeq& state, int prompt_len, int begin, int end,
                             double s, double t, const SampleConfig& cfg, const NoiseSchedule& sched,
                             CounterRng& rng) {
  if (!(t > s)) throw DegenerateTime("reverse_step requires t > s");
  TokenSeq next = state;
  int m = 0;
  for (int i = begin; i < end; ++i) m += state[static_cast<std::size_t>(i)] == p.config.mask_id;
  if (m == 0) throw NoMaskedPositions("reverse step on a block without masks");
  const double gt = sched.eval(t);
  const double gs = sched.eval(s);
  const int k = s <= 0.0 ? m : static_cast<int>(std::lround(m * (gt - gs) / gt));
  RecomputeDenoiser den(p);
  den.start(state, prompt_len, t);
  const auto logits = den.logits(state, begin, end, t);
  reverse_step_from_logits(logits, next, begin, end, prompt_len, k, cfg, rng, p.config.mask_id);
  return next;
}

struct EvalStats {
  double pass_rate = 0.0;
  double mean_steps = 0.0;
  long long generated_tokens = 0;
  double seconds = 0.0;  // sampling wall time only
};

// Samples every prompt once with a per-prompt stream forked from `seed`, so
// two evaluations with the same seed see the same randomness per prompt.
inline EvalStats evaluate_prompts(const DenoiserParams& p, const std::vector<ProgramSample>& prompts,
                                  const SampleConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                                  const Verifier& verifier = {}) {
  EvalStats st;
  if (prompts.empty()) return st;
  const CounterRng base(seed, 0xDEC0DE);
  long long steps = 0;
  int passed = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CounterRng rng = base.fork(i);
    const auto t0 = std::chrono::steady_clock::now();
    const Trajectory tr = sample_prompt(p, prompts[i], cfg, sched, rng);
    st.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& fin = tr.final_state();
    for (int j = tr.plan.window_begin(); j < tr.plan.window_end(); ++j) {
      st.generated_tokens += fin[static_cast<std::size_t>(j)] != Vocab::kPad;
    }
    steps += static_cast<long long>(tr.step_count());
    passed += verifier.score(fin);
  }
  st.mean_steps = static_cast<double>(steps) / static_cast<double>(prompts.size());
  st.pass_rate = static_cast<double>(passed) / static_cast<double>(prompts.size());
  return st;
}

// Samples every prompt once; tokens/second counts generated window tokens
// over sampling wall time only.
// Decoding is deterministic given the seed, so repeated passes only differ in
// wall time; the median pass is reported.
inline BenchRecord decode_throughput(const DenoiserParams& p, const std::vector<ProgramSample>& prompts,
                                     const SampleConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                                     const Verifier& verifier = {}, int passes = 1) {
  if (prompts.size() < 20) throw ConfigError("decode_throughput needs at least 20 prompts");
  if (passes < 1) throw ConfigError("decode_throughput needs at least one pass");
  EvalStats st = evaluate_prompts(p, prompts, cfg, sched, seed, verifier);
  std::vector<double> secs{st.seconds};
  for (int i = 1; i < passes; ++i) secs.push_back(evaluate_prompts(p, prompts, cfg, sched, seed, verifier).seconds);
  std::nth_element(secs.begin(), secs.begin() + secs.size() / 2, secs.end());
  st.seconds = secs[secs.size() / 2];
  BenchRecord rec;
  rec.block_size = cfg.block_size;
  rec.steps_per_block = cfg.steps_per_block;
  rec.generated_tokens = st.generated_tokens;
  rec.wall_seconds = st.seconds;
  rec.tokens_per_second = st.seconds > 0 ? static_cast<double>(st.generated_tokens) / st.seconds : 0.0;
  rec.mean_steps = st.mean_steps;
  rec.pass_rate = st.pass_rate;
  return rec;
}

}  // namespace ddlm
