#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bench_record.hpp"
#include "error.hpp"
#include "model.hpp"
#include "pipeline.hpp"
#include "sampler.hpp"
#include "verifier.hpp"

namespace ddlm {

inline constexpr const char* kBenchSchema = "# ddlm-bench v1";
inline constexpr const char* kSpeedupNote =
    "# speedup_ratio = window tokens per reverse step; the one-token-per-step limit (b=1) has ratio 1";

// Median wall time of one cached forward over a block of b masked positions
// that follows `prefix_len` committed tokens of `context`.
inline double measure_forward_time(const DenoiserParams& p, const TokenSeq& context, int prefix_len, int b,
                                   int repetitions = 30, int warmup = 5) {
  if (b < 1) throw ConfigError("measure_forward_time: b must be >= 1");
  if (repetitions < 1) throw ConfigError("measure_forward_time: repetitions must be >= 1");
  if (prefix_len < 0 || prefix_len + b > p.config.max_len) {
    throw CacheOverflow("measure_forward_time: prefix plus block exceeds max_len");
  }
  KVCache<float> cache(p.config);
  if (prefix_len > 0) {
    commit_block(p, cache, std::span<const TokenId>(context.ids.data(), static_cast<std::size_t>(prefix_len)), 1.0);
  }
  const std::vector<TokenId> block(static_cast<std::size_t>(b), p.config.mask_id);
  std::vector<double> times;
  float sink = 0.0f;
  for (int r = 0; r < warmup + repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto logits = forward_cached(p, cache, std::span<const TokenId>(block), 1.0);
    const auto t1 = std::chrono::steady_clock::now();
    sink += logits(0, 0);
    if (r >= warmup) times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!std::isfinite(sink)) throw NonFiniteActivation("measure_forward_time: non-finite output");
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  return times[times.size() / 2];
}

struct SweepConfig {
  std::vector<int> block_sizes{1, 2, 4, 8, 16, 32};
  SampleConfig sample;  // steps_per_block is capped at b for each record
  NoiseSchedule sched;
  std::uint64_t seed = 0;
  int repetitions = 30;
  int warmup = 5;
  int throughput_passes = 5;  // timing rounds over all block sizes; medians are reported

  void validate() const {
    if (block_sizes.empty() || block_sizes.front() != 1) {
      throw ConfigError("sweep: block sizes must start at 1");
    }
    for (std::size_t i = 1; i < block_sizes.size(); ++i) {
      if (block_sizes[i] <= block_sizes[i - 1]) throw ConfigError("sweep: block sizes must be strictly ascending");
    }
    if (repetitions < 30) throw ConfigError("sweep: at least 30 timing repetitions");
    if (throughput_passes < 1) throw ConfigError("sweep: at least one throughput pass");
    sample.validate();
  }
};

inline SampleConfig sweep_sample_config(const SampleConfig& base, int b) {
  SampleConfig sc = base;
  sc.block_size = b;
  if (sc.unmask_fractions.empty()) {
    sc.steps_per_block = std::min(sc.steps_per_block, b);
  } else if (static_cast<int>(sc.unmask_fractions.size()) > b) {
    sc.unmask_fractions = uniform_fractions(1.0 / b);
    sc.steps_per_block = b;
  }
  return sc;
}

// One record per block size. Forward time is measured on the first prompt's
// lattice; decoding covers every prompt with the same seed per b. Timing runs
// in rounds that visit every b once, so slow drift in machine load hits all
// block sizes alike; each b reports its median round.
inline std::vector<BenchRecord> bench_block_sweep(const DenoiserParams& p, const std::vector<ProgramSample>& prompts,
                                                  const SweepConfig& cfg, const Verifier& verifier = {},
                                                  const Vocab& vocab = Vocab::standard()) {
  cfg.validate();
  if (prompts.size() < 20) throw ConfigError("sweep: at least 20 prompts");
  const int max_len = p.config.max_len;
  const TokenSeq context = prompt_lattice(vocab, prompts.front(), static_cast<std::size_t>(max_len));
  const int prefix = static_cast<int>(prompts.front().prompt.size()) + 1;
  const std::size_t nb = cfg.block_sizes.size();
  std::vector<BenchRecord> out(nb);
  std::vector<std::vector<double>> fwd(nb), wall(nb);
  for (int round = 0; round < cfg.throughput_passes; ++round) {
    for (std::size_t i = 0; i < nb; ++i) {
      const int b = cfg.block_sizes[i];
      fwd[i].push_back(measure_forward_time(p, context, prefix, std::min(b, max_len - prefix), cfg.repetitions,
                                            cfg.warmup));
      out[i] = decode_throughput(p, prompts, sweep_sample_config(cfg.sample, b), cfg.sched, cfg.seed, verifier);
      wall[i].push_back(out[i].wall_seconds);
    }
  }
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  for (std::size_t i = 0; i < nb; ++i) {
    auto& rec = out[i];
    rec.forward_seconds = median(fwd[i]);
    rec.wall_seconds = median(wall[i]);
    rec.tokens_per_second = static_cast<double>(rec.generated_tokens) / rec.wall_seconds;
    rec.relative_forward_time = rec.forward_seconds / out.front().forward_seconds;
  }
  for (const auto& r : out) {
    if (r.generated_tokens != out.front().generated_tokens) {
      throw ConfigError("sweep: generated length differs across block sizes");
    }
  }
  return out;
}

// Index into `records` with the highest tokens/second.
inline std::size_t select_block(const std::vector<BenchRecord>& records) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].tokens_per_second > records[best].tokens_per_second) best = i;
  }
  return best;
}

inline void write_blocks_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
  os << kBenchSchema << '\n';
  os << "block_size,steps_per_block,tokens_per_second,relative_forward_time,forward_seconds,mean_steps,pass_rate,"
        "wall_seconds,generated_tokens\n";
  for (const auto& r : records) {
    os << r.block_size << ',' << r.steps_per_block << ',' << detail::fmt_double(r.tokens_per_second) << ','
       << detail::fmt_double(r.relative_forward_time) << ',';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9f", r.forward_seconds);
    os << buf << ',' << detail::fmt_double(r.mean_steps) << ',' << detail::fmt_double(r.pass_rate) << ','
       << detail::fmt_double(r.wall_seconds) << ',' << r.generated_tokens << '\n';
  }
}

inline void write_onpolicy_csv(std::ostream& os, const std::vector<OnPolicyLogRow>& rows) {
  os << kBenchSchema << '\n' << kSpeedupNote << '\n';
  write_onpolicy_log(os, rows);
}

// ---- plots -----------------------------------------------------------------

struct PlotPoint {
  double x = 0, y = 0;
  std::string x_label, y_label;  // exact text written next to the point
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

// A single-series line plot. Output depends only on the arguments.
inline std::string render_line_svg(const std::string& title, const std::string& x_name, const std::string& y_name,
                                   const std::vector<PlotPoint>& points) {
  const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!points.empty()) {
    x0 = x1 = points.front().x;
    y0 = y1 = points.front().y;
    for (const auto& pt : points) {
      x0 = std::min(x0, pt.x);
      x1 = std::max(x1, pt.x);
      y0 = std::min(y0, pt.y);
      y1 = std::max(y1, pt.y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << detail::xml_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << detail::xml_escape(x_name) << "</text>\n";
  os << "<text x=\"16\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << H / 2 << ")\">" << detail::xml_escape(y_name) << "</text>\n";
  os << "<text x=\"" << L - 6 << "\" y=\"" << detail::svg_num(py(y0)) << "\" text-anchor=\"end\" font-size=\"10\">"
     << detail::fmt_double(y0) << "</text>\n";
  os << "<text x=\"" << L - 6 << "\" y=\"" << detail::svg_num(py(y1)) << "\" text-anchor=\"end\" font-size=\"10\">"
     << detail::fmt_double(y1) << "</text>\n";
  if (!points.empty()) {
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < points.size(); ++i) {
      os << (i ? " " : "") << detail::svg_num(px(points[i].x)) << ',' << detail::svg_num(py(points[i].y));
    }
    os << "\"/>\n";
  }
  for (const auto& pt : points) {
    os << "<circle cx=\"" << detail::svg_num(px(pt.x)) << "\" cy=\"" << detail::svg_num(py(pt.y))
       << "\" r=\"3\" fill=\"steelblue\" data-x=\"" << detail::xml_escape(pt.x_label) << "\" data-y=\""
       << detail::xml_escape(pt.y_label) << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string render_onpolicy_svg(const std::vector<OnPolicyLogRow>& rows) {
  std::vector<PlotPoint> pts;
  for (const auto& r : rows) {
    pts.push_back({static_cast<double>(r.update), r.speedup_ratio, std::to_string(r.update),
                   detail::fmt_double(r.speedup_ratio)});
  }
  return render_line_svg("speedup ratio during on-policy training", "update", "speedup ratio", pts);
}

inline std::string render_blocks_svg(const std::vector<BenchRecord>& records) {
  std::vector<PlotPoint> pts;
  for (const auto& r : records) {
    pts.push_back({static_cast<double>(r.block_size), r.relative_forward_time, std::to_string(r.block_size),
                   detail::fmt_double(r.relative_forward_time)});
  }
  return render_line_svg("relative forward time T(b)/T(1)", "block size b", "relative forward time", pts);
}

struct CurveArtifacts {
  std::string csv;
  std::string svg;
};

// Re-renders the on-policy CSV (training log or a previous bench output).
inline CurveArtifacts bench_onpolicy_curve(std::istream& log) {
  const auto rows = read_onpolicy_log(log);
  std::ostringstream csv;
  write_onpolicy_csv(csv, rows);
  return {csv.str(), render_onpolicy_svg(rows)};
}

inline CurveArtifacts bench_onpolicy_curve(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingLog("no on-policy log at " + path);
  return bench_onpolicy_curve(f);
}

// ---- quality ---------------------------------------------------------------

inline double eval_quality(const DenoiserParams& p, const std::vector<ProgramSample>& heldout,
                           const SampleConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                           const Verifier& verifier = {}) {
  return evaluate_prompts(p, heldout, cfg, sched, seed, verifier).pass_rate;
}

// Same evaluation with a caller-built denoiser per prompt; make(i) returns
// a denoiser for heldout[i].
template <class MakeDenoiser>
double eval_quality_with(MakeDenoiser&& make, const std::vector<ProgramSample>& heldout, int max_len,
                         const SampleConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                         const Verifier& verifier = {}, const Vocab& vocab = Vocab::standard()) {
  if (heldout.empty()) return 0.0;
  const CounterRng base(seed, 0xDEC0DE);
  int passed = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    CounterRng rng = base.fork(i);
    auto den = make(i);
    const TokenSeq start = prompt_lattice(vocab, heldout[i], static_cast<std::size_t>(max_len));
    const int prompt_len = static_cast<int>(heldout[i].prompt.size()) + 1;
    const BlockPlan plan = BlockPlan::make(prompt_len, max_len, cfg.block_size);
    passed += verifier.score(sample_blockwise(den, start, prompt_len, plan, cfg, sched, rng).final_state());
  }
  return static_cast<double>(passed) / static_cast<double>(heldout.size());
}

}  // namespace ddlm
