#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "ddlm/pipeline.hpp"

using namespace ddlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.model_dim = 16;
  c.heads = 2;
  c.ff_dim = 32;
  c.max_len = 40;
  return c;
}

std::vector<ProgramSample> tiny_corpus(std::size_t n = 32) { return gen_corpus(11, n, 1, 40); }

std::vector<Example> tiny_examples() { return make_examples(Vocab::standard(), tiny_corpus(), 40); }

CurriculumConfig tiny_curriculum(std::uint64_t steps) {
  CurriculumConfig c;
  c.total_steps = steps;
  c.mask_only_fraction = 0.5;
  c.batch_size = 2;
  c.log_every = 1;
  c.optimizer.warmup_steps = 2;
  c.seed = 5;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ddlm_pipeline_" + name)).string();
}

}  // namespace

TEST(Curriculum, BoundaryIsFloorOfFraction) {
  CurriculumConfig c;
  c.total_steps = 2000;
  c.mask_only_fraction = 0.8;
  EXPECT_EQ(c.boundary(), 1600u);
  c.total_steps = 7;
  c.mask_only_fraction = 0.5;
  EXPECT_EQ(c.boundary(), 3u);
  c.mask_only_fraction = 1.0;
  EXPECT_EQ(c.boundary(), 7u);
}

TEST(Curriculum, RejectsBadFractions) {
  CurriculumConfig c;
  c.mask_only_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_only_fraction = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_only_fraction = 0.8;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Curriculum, PhaseOneHasNoEditTerm) {
  const auto cfg = tiny_curriculum(8);
  const auto res = train_tsc(tiny_config(), cfg, tiny_examples());
  ASSERT_EQ(res.log.size(), 8u);
  for (const auto& row : res.log) {
    if (row.step < cfg.boundary()) {
      EXPECT_EQ(row.phase, 1);
      EXPECT_EQ(row.loss_edit, 0.0);
    } else {
      EXPECT_EQ(row.phase, 2);
      EXPECT_GT(row.loss_edit, 0.0);
    }
    EXPECT_NEAR(row.loss_total, row.loss_edit + row.loss_mask, 1e-9);
  }
}

TEST(Curriculum, ResumeReproducesUninterruptedRun) {
  const auto cfg = tiny_curriculum(10);
  const auto ex = tiny_examples();
  const auto full = train_tsc(tiny_config(), cfg, ex);

  TrainHooks first;
  first.stop_after = 4;
  const auto part = train_tsc(tiny_config(), cfg, ex, first);
  const std::string path = temp_path("resume.ckpt");
  save_checkpoint(path, part.params, part.optimizer);
  const auto resumed = train_tsc(tiny_config(), cfg, ex, {}, load_checkpoint(path));
  std::filesystem::remove(path);

  EXPECT_EQ(resumed.params.values, full.params.values);
  EXPECT_EQ(resumed.optimizer, full.optimizer);
}

TEST(Curriculum, DivergenceSavesLastGood) {
  const auto cfg = tiny_curriculum(4);
  Checkpoint bad{DenoiserParams::init(tiny_config(), 1), std::nullopt};
  for (auto& v : bad.params.values) v = std::numeric_limits<float>::quiet_NaN();
  TrainHooks hooks;
  hooks.last_good_path = temp_path("last_good.ckpt");
  try {
    train_tsc(tiny_config(), cfg, tiny_examples(), hooks, bad);
    FAIL() << "expected divergence";
  } catch (const DivergenceDetected& e) {
    EXPECT_EQ(e.last_good_checkpoint, hooks.last_good_path);
    EXPECT_TRUE(std::filesystem::exists(hooks.last_good_path));
  }
  std::filesystem::remove(hooks.last_good_path);
}

TEST(Curriculum, LogFormat) {
  std::ostringstream os;
  write_train_log(os, {{0, 1, 2.5, 0.0, 2.5}, {10, 2, 3.0, 1.0, 2.0}});
  EXPECT_EQ(os.str(),
            "step,phase,loss_total,loss_edit,loss_mask\n"
            "0,1,2.500000,0.000000,2.500000\n"
            "10,2,3.000000,1.000000,2.000000\n");
}

TEST(Distill, SelectTopBreaksTiesByIndex) {
  EXPECT_EQ(select_top({1.0, 3.0, 3.0, 2.0}, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_top({5.0, 5.0, 5.0}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(select_top({0.5}, 3), (std::vector<std::size_t>{0}));
}

TEST(Distill, PoolKeepsBestScores) {
  const auto p = DenoiserParams::init(tiny_config(), 3);
  DistillConfig cfg;
  cfg.pool_size = 4;
  cfg.keep_top = 2;
  cfg.samples = 3;
  cfg.sample.block_size = 8;
  cfg.sample.steps_per_block = 2;
  const auto pool = build_pool(p, tiny_corpus(), cfg);
  ASSERT_EQ(pool.entries.size(), 3u);
  for (const auto& e : pool.entries) {
    ASSERT_EQ(e.candidates.size(), 4u);
    ASSERT_EQ(e.kept.size(), 2u);
    const double worst_kept = e.candidates[e.kept[1]].score;
    EXPECT_GE(e.candidates[e.kept[0]].score, worst_kept);
    for (std::size_t g = 0; g < e.candidates.size(); ++g) {
      if (g != e.kept[0] && g != e.kept[1]) {
        EXPECT_LE(e.candidates[g].score, worst_kept);
      }
    }
  }
}

TEST(Distill, ValidatesCounts) {
  DistillConfig cfg;
  cfg.keep_top = 9;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.keep_top = 2;
  cfg.augment_alpha = 0.2;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Distill, FinetuneIsDeterministicAndMovesParams) {
  const auto p = DenoiserParams::init(tiny_config(), 3);
  DistillConfig cfg;
  cfg.pool_size = 2;
  cfg.keep_top = 1;
  cfg.samples = 4;
  cfg.finetune_steps = 3;
  cfg.batch_size = 2;
  cfg.sample.block_size = 8;
  const auto a = distill_trajectories(p, tiny_corpus(), cfg);
  const auto b = distill_trajectories(p, tiny_corpus(), cfg);
  EXPECT_EQ(a.params.values, b.params.values);
  EXPECT_NE(a.params.values, p.values);
  EXPECT_EQ(a.finetune_loss.size(), 3u);
}

TEST(OnPolicy, ZeroUpdatesLeavesParamsUnchanged) {
  const auto p = DenoiserParams::init(tiny_config(), 4);
  OnPolicyTrainConfig cfg;
  cfg.updates = 0;
  const auto res = train_onpolicy(p, tiny_corpus(), tiny_corpus(4), Verifier{}, cfg);
  EXPECT_EQ(res.params.values, p.values);
  EXPECT_TRUE(res.log.empty());
}

TEST(OnPolicy, FractionRamp) {
  OnPolicyTrainConfig cfg;
  cfg.updates = 5;
  cfg.fraction_start = 0.25;
  cfg.fraction_end = 0.5;
  EXPECT_EQ(cfg.sample_at(0).steps_per_block, 4);
  EXPECT_EQ(cfg.sample_at(4).steps_per_block, 2);
  EXPECT_EQ(cfg.sample_at(4).confidence_threshold, cfg.confidence_threshold);
  cfg.fraction_end = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(OnPolicy, LogsAndRoundTrips) {
  const auto p = DenoiserParams::init(tiny_config(), 4);
  OnPolicyTrainConfig cfg;
  cfg.updates = 3;
  cfg.rollouts_per_update = 2;
  cfg.eval_every = 2;
  cfg.eval_prompts = 3;
  cfg.sample.block_size = 8;
  const auto res = train_onpolicy(p, tiny_corpus(), tiny_corpus(3), Verifier{}, cfg);
  ASSERT_EQ(res.log.size(), 3u);
  EXPECT_EQ(res.log[0].update, 0);
  EXPECT_EQ(res.log[1].update, 2);
  EXPECT_EQ(res.log[2].update, 3);
  EXPECT_NE(res.params.values, p.values);

  std::stringstream ss;
  write_onpolicy_log(ss, res.log);
  const auto rows = read_onpolicy_log(ss);
  ASSERT_EQ(rows.size(), res.log.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].update, res.log[i].update);
    EXPECT_NEAR(rows[i].mean_steps, res.log[i].mean_steps, 1e-6);
    EXPECT_NEAR(rows[i].speedup_ratio, res.log[i].speedup_ratio, 1e-6);
  }
}

TEST(OnPolicy, ReadingEmptyLogFails) {
  std::istringstream empty;
  EXPECT_THROW(read_onpolicy_log(empty), MissingLog);
  std::istringstream header_only("update,mean_steps,pass_rate,speedup_ratio\n");
  EXPECT_THROW(read_onpolicy_log(header_only), MissingLog);
  std::istringstream bad("update,mean_steps,pass_rate,speedup_ratio\n1,2\n");
  EXPECT_THROW(read_onpolicy_log(bad), ParseError);
}

TEST(Curriculum, SmallCorpusLossFallsBelowQuarter) {
  ModelConfig c;
  c.layers = 1;
  c.model_dim = 32;
  c.heads = 2;
  c.ff_dim = 64;
  const auto ex = make_examples(Vocab::standard(), gen_corpus(7, 64, 2));
  CurriculumConfig cfg;
  cfg.total_steps = 2000;
  cfg.batch_size = 8;
  cfg.seed = 7;
  const DiffLossConfig lc{cfg.sched, cfg.edit, true};
  const double before = eval_diff_loss(DenoiserParams::init(c, cfg.seed), ex, lc, 3).total;
  const double after = eval_diff_loss(train_tsc(c, cfg, ex).params, ex, lc, 3).total;
  EXPECT_LT(after, 0.25 * before);
}
