#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddlm/ddlm.hpp"

namespace fs = std::filesystem;
using namespace ddlm;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<int> depth;
  std::optional<std::string> corpus;
  std::optional<std::uint64_t> steps;
  std::optional<int> batch;
  std::optional<int> block_size;
  std::optional<int> steps_per_block;
  std::optional<int> updates;
};

RunConfig resolve(const Overrides& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = load_run_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.n) cfg.corpus.n = *o.n;
  if (o.depth) cfg.corpus.depth = *o.depth;
  if (o.corpus) cfg.corpus.path = *o.corpus;
  if (o.steps) cfg.curriculum.total_steps = *o.steps;
  if (o.batch) cfg.curriculum.batch_size = *o.batch;
  if (o.block_size) cfg.sampler.block_size = *o.block_size;
  if (o.steps_per_block) cfg.sampler.steps_per_block = *o.steps_per_block;
  if (o.updates) cfg.onpolicy.updates = *o.updates;
  cfg.propagate();
  cfg.validate();
  return cfg;
}

void echo_config(const RunConfig& cfg, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_json(cfg).dump(2) << '\n';
}

fs::path prepare_out(const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::vector<ProgramSample> training_corpus(const RunConfig& cfg) {
  if (!cfg.corpus.path.empty()) return read_corpus(cfg.corpus.path);
  return gen_corpus(cfg.seed, cfg.corpus.n, cfg.corpus.depth);
}

std::vector<ProgramSample> heldout_prompts(const RunConfig& cfg, const std::vector<ProgramSample>& train,
                                           std::size_t n) {
  return gen_heldout(train, cfg.seed, n, cfg.corpus.depth);
}

void add_common(CLI::App* sub, Overrides& o, std::string& out) {
  sub->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Seed for every stage");
  sub->add_option("--out", out, "Output directory")->required();
}

void add_corpus_flags(CLI::App* sub, Overrides& o) {
  sub->add_option("--corpus", o.corpus, "Corpus TSV (default: generate from seed)");
  sub->add_option("--n", o.n, "Generated corpus size");
  sub->add_option("--depth", o.depth, "Grammar depth");
}

void add_sampler_flags(CLI::App* sub, Overrides& o) {
  sub->add_option("--block-size", o.block_size, "Block size b");
  sub->add_option("--steps-per-block", o.steps_per_block, "Reverse steps per block K_b");
}

std::vector<int> parse_blocks(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--sweep-blocks: '" + item + "' is not an integer");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete diffusion language model: corpus, training, sampling and benchmarks"};
  app.require_subcommand(1);

  Overrides o;
  std::string out, checkpoint, prompt, sweep, onpolicy_log;
  bool trace = false;

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic program corpus as TSV");
  gen->add_option("--seed", o.seed, "Corpus seed");
  gen->add_option("--n", o.n, "Number of samples");
  gen->add_option("--depth", o.depth, "Grammar depth in [1, 4]");
  gen->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output TSV path")->required();

  auto* train = app.add_subcommand("train", "Two-stage curriculum training");
  add_common(train, o, out);
  add_corpus_flags(train, o);
  train->add_option("--steps", o.steps, "Total training steps");
  train->add_option("--batch-size", o.batch, "Sequences per step");
  train->add_option("--resume", checkpoint, "Checkpoint with optimizer state to resume from")
      ->check(CLI::ExistingFile);

  auto* distill = app.add_subcommand("distill", "Constrained-order trajectory distillation");
  add_common(distill, o, out);
  add_corpus_flags(distill, o);
  add_sampler_flags(distill, o);
  distill->add_option("--checkpoint", checkpoint, "Model to distill")->required()->check(CLI::ExistingFile);

  auto* onpolicy = app.add_subcommand("train-onpolicy", "On-policy step reduction");
  add_common(onpolicy, o, out);
  add_corpus_flags(onpolicy, o);
  add_sampler_flags(onpolicy, o);
  onpolicy->add_option("--checkpoint", checkpoint, "Starting model")->required()->check(CLI::ExistingFile);
  onpolicy->add_option("--updates", o.updates, "Number of policy updates");

  auto* sample = app.add_subcommand("sample", "Generate a completion for one prompt");
  add_common(sample, o, out);
  add_sampler_flags(sample, o);
  sample->add_option("--checkpoint", checkpoint, "Model")->required()->check(CLI::ExistingFile);
  sample->add_option("--prompt", prompt, "Prompt text, e.g. 'x = 3+4 ;'")->required();
  sample->add_flag("--trace", trace, "Print every intermediate state (masks as _)");

  auto* bench = app.add_subcommand("bench", "Block-size sweep and on-policy curve");
  add_common(bench, o, out);
  add_corpus_flags(bench, o);
  add_sampler_flags(bench, o);
  bench->add_option("--checkpoint", checkpoint, "Model")->required()->check(CLI::ExistingFile);
  bench->add_option("--sweep-blocks", sweep, "Comma-separated block sizes, ascending, starting at 1");
  bench->add_option("--onpolicy-log", onpolicy_log, "On-policy CSV to plot");

  auto* eval = app.add_subcommand("eval", "Verifier pass rate on held-out prompts");
  add_common(eval, o, out);
  add_corpus_flags(eval, o);
  add_sampler_flags(eval, o);
  eval->add_option("--checkpoint", checkpoint, "Model")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    RunConfig cfg = resolve(o);

    if (*gen) {
      const auto corpus = gen_corpus(cfg.seed, cfg.corpus.n, cfg.corpus.depth);
      const fs::path path(out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      write_corpus(path.string(), corpus);
      echo_config(cfg, fs::path(path.string() + ".config.json"));
      std::cout << "wrote " << corpus.size() << " samples to " << path.string() << '\n';
      return 0;
    }

    const fs::path dir = prepare_out(out);
    echo_config(cfg, dir / "config.json");

    if (*train) {
      const auto corpus = training_corpus(cfg);
      std::optional<Checkpoint> resume;
      if (!checkpoint.empty()) resume = load_checkpoint(checkpoint);
      TrainHooks hooks;
      hooks.last_good_path = (dir / "last_good.ckpt").string();
      hooks.on_log = [](const TrainLogRow& r) {
        std::cout << "step " << r.step << " phase " << r.phase << " loss " << r.loss_total << '\n';
      };
      const auto res = train_tsc(cfg.model, cfg.curriculum, make_examples(Vocab::standard(), corpus,
                                                                          static_cast<std::size_t>(cfg.model.max_len)),
                                 hooks, resume);
      save_checkpoint((dir / "model.ckpt").string(), res.params, res.optimizer);
      std::ofstream log(dir / "train_log.csv");
      write_train_log(log, res.log);
      return 0;
    }

    const Checkpoint ck = load_checkpoint(checkpoint);

    if (*distill) {
      const auto corpus = training_corpus(cfg);
      const auto res = distill_trajectories(ck.params, corpus, cfg.distill);
      save_checkpoint((dir / "distilled.ckpt").string(), res.params);
      std::ofstream log(dir / "distill_log.csv");
      log << "step,loss\n";
      for (std::size_t i = 0; i < res.finetune_loss.size(); ++i) {
        log << i << ',' << detail::fmt_double(res.finetune_loss[i]) << '\n';
      }
      return 0;
    }

    if (*onpolicy) {
      const auto corpus = training_corpus(cfg);
      const auto held = heldout_prompts(cfg, corpus, cfg.onpolicy.eval_prompts);
      const auto res = train_onpolicy(ck.params, corpus, held, Verifier{}, cfg.onpolicy, [](const OnPolicyLogRow& r) {
        std::cout << "update " << r.update << " steps " << r.mean_steps << " pass " << r.pass_rate << " speedup "
                  << r.speedup_ratio << '\n';
      });
      save_checkpoint((dir / "onpolicy.ckpt").string(), res.params);
      std::ofstream log(dir / "onpolicy_log.csv");
      write_onpolicy_log(log, res.log);
      return 0;
    }

    if (*sample) {
      ProgramSample ps{prompt, "", 0};
      CounterRng rng(cfg.seed, 0x5A3F1E);
      const Trajectory tr = sample_prompt(ck.params, ps, cfg.sampler, cfg.schedule, rng);
      if (trace) {
        for (const auto& s : tr.states) std::cout << render_state(Vocab::standard(), s) << '\n';
      }
      std::cout << program_text(Vocab::standard(), tr.final_state()) << '\n';
      return 0;
    }

    if (*bench) {
      SweepConfig sw;
      sw.block_sizes = sweep.empty() ? cfg.bench.block_sizes : parse_blocks(sweep);
      sw.repetitions = cfg.bench.repetitions;
      sw.warmup = cfg.bench.warmup;
      sw.throughput_passes = cfg.bench.throughput_passes;
      sw.sample = cfg.sampler;
      sw.sched = cfg.schedule;
      sw.seed = cfg.seed;
      const auto corpus = training_corpus(cfg);
      const auto prompts = heldout_prompts(cfg, corpus, cfg.bench.prompts);
      const auto records = bench_block_sweep(ck.params, prompts, sw);
      std::ostringstream csv;
      write_blocks_csv(csv, records);
      write_text(dir / "blocks.csv", csv.str());
      write_text(dir / "blocks.svg", render_blocks_svg(records));
      for (const auto& r : records) {
        std::cout << "b=" << r.block_size << " K=" << r.steps_per_block << " rel_fwd=" << r.relative_forward_time
                  << " tok/s=" << r.tokens_per_second << " pass=" << r.pass_rate << '\n';
      }
      if (!onpolicy_log.empty()) {
        const auto art = bench_onpolicy_curve(onpolicy_log);
        write_text(dir / "onpolicy.csv", art.csv);
        write_text(dir / "onpolicy.svg", art.svg);
      } else {
        std::cerr << "no --onpolicy-log given; skipping onpolicy.csv/onpolicy.svg\n";
      }
      return 0;
    }

    if (*eval) {
      const auto corpus = training_corpus(cfg);
      const auto held = heldout_prompts(cfg, corpus, cfg.corpus.heldout);
      const EvalStats st = evaluate_prompts(ck.params, held, cfg.sampler, cfg.schedule, cfg.seed);
      Json j{{"prompts", held.size()}, {"pass_rate", st.pass_rate}, {"mean_steps", st.mean_steps}};
      write_text(dir / "eval.json", j.dump(2) + "\n");
      std::cout << "pass_rate " << st.pass_rate << " on " << held.size() << " prompts\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
