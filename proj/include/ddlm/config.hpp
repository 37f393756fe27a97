#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bench.hpp"
#include "error.hpp"
#include "model.hpp"
#include "pipeline.hpp"
#include "sampler.hpp"
#include "schedule.hpp"

namespace ddlm {

using Json = nlohmann::ordered_json;

struct CorpusConfig {
  std::string path;  // empty: generate from (seed, n, depth)
  std::size_t n = 5000;
  int depth = 2;
  std::size_t heldout = 200;

  void validate() const {
    if (n < 1) throw ConfigError("corpus: n must be >= 1");
    if (depth < 1 || depth > 4) throw ConfigError("corpus: depth must lie in [1, 4]");
  }
};

struct BenchConfig {
  std::vector<int> block_sizes{1, 2, 4, 8, 16, 32};
  int repetitions = 30;
  int warmup = 5;
  int throughput_passes = 5;
  std::size_t prompts = 50;
};

struct RunConfig {
  std::uint64_t seed = 7;
  CorpusConfig corpus;
  ModelConfig model;
  NoiseSchedule schedule;
  EditSchedule edit;
  CurriculumConfig curriculum;
  SampleConfig sampler;
  DistillConfig distill;
  OnPolicyTrainConfig onpolicy;
  BenchConfig bench;

  // Pushes the shared seed and schedule into every stage config.
  void propagate() {
    curriculum.seed = seed;
    curriculum.sched = schedule;
    curriculum.edit = edit;
    distill.seed = seed;
    distill.sched = schedule;
    distill.sample = sampler;
    onpolicy.seed = seed;
    onpolicy.sched = schedule;
    onpolicy.sample = sampler;
  }

  void validate() const {
    corpus.validate();
    model.validate();
    curriculum.validate();
    sampler.validate();
    distill.validate();
    onpolicy.validate();
    SweepConfig sw;
    sw.block_sizes = bench.block_sizes;
    sw.repetitions = bench.repetitions;
    sw.warmup = bench.warmup;
    sw.throughput_passes = bench.throughput_passes;
    sw.sample = sampler;
    sw.validate();
    if (bench.prompts < 20) throw ConfigError("bench: at least 20 prompts");
    if (model.vocab_size != Vocab::standard().size()) {
      throw ConfigError("model: vocab_size must equal the corpus vocabulary size");
    }
  }
};

namespace detail {

// Reads fields from one JSON object and rejects any key it was not asked for.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_optimizer(StrictObject& o, OptimizerConfig& c) {
  o.get("learning_rate", c.learning_rate);
  o.get("min_lr_fraction", c.min_lr_fraction);
  o.get("warmup_steps", c.warmup_steps);
  o.get("rms_beta", c.beta);
  o.get("rms_eps", c.eps);
}

inline Json write_optimizer(const OptimizerConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"min_lr_fraction", c.min_lr_fraction},
              {"warmup_steps", c.warmup_steps},
              {"rms_beta", c.beta},
              {"rms_eps", c.eps}};
}

inline void merge_optimizer(StrictObject& o, OptimizerConfig& c) {
  if (!o.has("optimizer")) return;
  StrictObject s(o.at("optimizer"), "optimizer");
  read_optimizer(s, c);
  s.finish();
}

}  // namespace detail

// Overlays the keys present in `j` onto `cfg`; keys not present keep their
// current values.
inline void apply_json(RunConfig& cfg, const Json& j) {
  using detail::StrictObject;
  StrictObject root(j, "config");
  root.get("seed", cfg.seed);
  if (root.has("corpus")) {
    StrictObject o(root.at("corpus"), "corpus");
    o.get("path", cfg.corpus.path);
    o.get("n", cfg.corpus.n);
    o.get("depth", cfg.corpus.depth);
    o.get("heldout", cfg.corpus.heldout);
    o.finish();
  }
  if (root.has("model")) {
    StrictObject o(root.at("model"), "model");
    o.get("layers", cfg.model.layers);
    o.get("model_dim", cfg.model.model_dim);
    o.get("heads", cfg.model.heads);
    o.get("ff_dim", cfg.model.ff_dim);
    o.get("vocab_size", cfg.model.vocab_size);
    o.get("max_len", cfg.model.max_len);
    o.get("mask_id", cfg.model.mask_id);
    o.get("time_embed", cfg.model.time_embed);
    o.finish();
  }
  if (root.has("schedule")) {
    StrictObject o(root.at("schedule"), "schedule");
    if (o.has("kind")) {
      std::string kind;
      o.get("kind", kind);
      cfg.schedule.kind = schedule_kind_from(kind);
    }
    o.finish();
  }
  if (root.has("edit")) {
    StrictObject o(root.at("edit"), "edit");
    double amax = cfg.edit.alpha_max;
    o.get("alpha_max", amax);
    cfg.edit = EditSchedule(amax);
    o.finish();
  }
  if (root.has("curriculum")) {
    StrictObject o(root.at("curriculum"), "curriculum");
    o.get("total_steps", cfg.curriculum.total_steps);
    o.get("mask_only_fraction", cfg.curriculum.mask_only_fraction);
    o.get("batch_size", cfg.curriculum.batch_size);
    o.get("log_every", cfg.curriculum.log_every);
    detail::merge_optimizer(o, cfg.curriculum.optimizer);
    o.finish();
  }
  if (root.has("sampler")) {
    StrictObject o(root.at("sampler"), "sampler");
    auto& s = cfg.sampler;
    o.get("block_size", s.block_size);
    o.get("steps_per_block", s.steps_per_block);
    o.get("temperature", s.temperature);
    if (o.has("unmask_rule")) {
      std::string rule;
      o.get("unmask_rule", rule);
      if (rule == "confidence_topk") {
        s.unmask_rule = UnmaskRule::confidence_topk;
      } else if (rule == "random") {
        s.unmask_rule = UnmaskRule::random;
      } else {
        throw ConfigError("sampler.unmask_rule: unknown rule '" + rule + "'");
      }
    }
    o.get("unmask_fractions", s.unmask_fractions);
    o.get("confidence_threshold", s.confidence_threshold);
    o.get("allow_edit_revision", s.allow_edit_revision);
    o.get("revision_threshold", s.revision_threshold);
    o.get("use_cache", s.use_cache);
    o.finish();
  }
  if (root.has("distill")) {
    StrictObject o(root.at("distill"), "distill");
    auto& d = cfg.distill;
    o.get("pool_size", d.pool_size);
    o.get("keep_top", d.keep_top);
    o.get("samples", d.samples);
    o.get("augment_alpha", d.augment_alpha);
    o.get("finetune_steps", d.finetune_steps);
    o.get("batch_size", d.batch_size);
    detail::merge_optimizer(o, d.optimizer);
    o.finish();
  }
  if (root.has("onpolicy")) {
    StrictObject o(root.at("onpolicy"), "onpolicy");
    auto& p = cfg.onpolicy;
    o.get("updates", p.updates);
    o.get("rollouts_per_update", p.rollouts_per_update);
    o.get("beta", p.beta);
    o.get("fraction_start", p.fraction_start);
    o.get("fraction_end", p.fraction_end);
    o.get("confidence_threshold", p.confidence_threshold);
    o.get("eval_every", p.eval_every);
    o.get("eval_prompts", p.eval_prompts);
    o.get("collapse_window", p.collapse_window);
    detail::merge_optimizer(o, p.optimizer);
    o.finish();
  }
  if (root.has("bench")) {
    StrictObject o(root.at("bench"), "bench");
    o.get("block_sizes", cfg.bench.block_sizes);
    o.get("repetitions", cfg.bench.repetitions);
    o.get("warmup", cfg.bench.warmup);
    o.get("throughput_passes", cfg.bench.throughput_passes);
    o.get("prompts", cfg.bench.prompts);
    o.finish();
  }
  root.finish();
}

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["corpus"] = {{"path", c.corpus.path}, {"n", c.corpus.n}, {"depth", c.corpus.depth}, {"heldout", c.corpus.heldout}};
  j["model"] = {{"layers", c.model.layers},     {"model_dim", c.model.model_dim},   {"heads", c.model.heads},
                {"ff_dim", c.model.ff_dim},     {"vocab_size", c.model.vocab_size}, {"max_len", c.model.max_len},
                {"mask_id", c.model.mask_id},   {"time_embed", c.model.time_embed}};
  j["schedule"] = {{"kind", to_string(c.schedule.kind)}};
  j["edit"] = {{"alpha_max", c.edit.alpha_max}};
  j["curriculum"] = {{"total_steps", c.curriculum.total_steps},
                     {"mask_only_fraction", c.curriculum.mask_only_fraction},
                     {"batch_size", c.curriculum.batch_size},
                     {"log_every", c.curriculum.log_every},
                     {"optimizer", detail::write_optimizer(c.curriculum.optimizer)}};
  const auto& s = c.sampler;
  j["sampler"] = {{"block_size", s.block_size},
                  {"steps_per_block", s.steps_per_block},
                  {"temperature", s.temperature},
                  {"unmask_rule", s.unmask_rule == UnmaskRule::random ? "random" : "confidence_topk"},
                  {"unmask_fractions", s.unmask_fractions},
                  {"confidence_threshold", s.confidence_threshold},
                  {"allow_edit_revision", s.allow_edit_revision},
                  {"revision_threshold", s.revision_threshold},
                  {"use_cache", s.use_cache}};
  const auto& d = c.distill;
  j["distill"] = {{"pool_size", d.pool_size},       {"keep_top", d.keep_top},
                  {"samples", d.samples},           {"augment_alpha", d.augment_alpha},
                  {"finetune_steps", d.finetune_steps}, {"batch_size", d.batch_size},
                  {"optimizer", detail::write_optimizer(d.optimizer)}};
  const auto& p = c.onpolicy;
  j["onpolicy"] = {{"updates", p.updates},
                   {"rollouts_per_update", p.rollouts_per_update},
                   {"beta", p.beta},
                   {"fraction_start", p.fraction_start},
                   {"fraction_end", p.fraction_end},
                   {"confidence_threshold", p.confidence_threshold},
                   {"eval_every", p.eval_every},
                   {"eval_prompts", p.eval_prompts},
                   {"collapse_window", p.collapse_window},
                   {"optimizer", detail::write_optimizer(p.optimizer)}};
  j["bench"] = {{"block_sizes", c.bench.block_sizes},
                {"repetitions", c.bench.repetitions},
                {"warmup", c.bench.warmup},
                {"throughput_passes", c.bench.throughput_passes},
                {"prompts", c.bench.prompts}};
  return j;
}

inline Json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(where + ": invalid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig cfg;
  apply_json(cfg, parse_json_text(ss.str(), path));
  return cfg;
}

}  // namespace ddlm
