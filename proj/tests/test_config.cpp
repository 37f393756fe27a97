#include <gtest/gtest.h>

#include "ddlm/config.hpp"

using namespace ddlm;

TEST(Config, RoundTripsThroughJson) {
  RunConfig a;
  a.seed = 19;
  a.corpus.depth = 3;
  a.schedule.kind = ScheduleKind::cosine;
  a.sampler.unmask_rule = UnmaskRule::random;
  a.sampler.unmask_fractions = {0.5, 1.0};
  a.onpolicy.optimizer.learning_rate = 2e-4;
  RunConfig b;
  apply_json(b, to_json(a));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Config, OverlayKeepsMissingKeys) {
  RunConfig cfg;
  apply_json(cfg, Json::parse(R"({"curriculum": {"total_steps": 12}})"));
  EXPECT_EQ(cfg.curriculum.total_steps, 12u);
  EXPECT_EQ(cfg.curriculum.batch_size, RunConfig{}.curriculum.batch_size);
  EXPECT_EQ(cfg.seed, RunConfig{}.seed);
}

TEST(Config, RejectsUnknownKeys) {
  RunConfig cfg;
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"sede": 1})")), ConfigError);
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"model": {"dim": 8}})")), ConfigError);
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"onpolicy": {"optimizer": {"lr": 1}}})")), ConfigError);
  try {
    apply_json(cfg, Json::parse(R"({"sampler": {"blocksize": 4}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("blocksize"), std::string::npos);
  }
}

TEST(Config, RejectsWrongTypesAndValues) {
  RunConfig cfg;
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"seed": "seven"})")), ConfigError);
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"schedule": {"kind": "quadratic"}})")), ConfigError);
  EXPECT_THROW(apply_json(cfg, Json::parse(R"({"sampler": {"unmask_rule": "greedy"}})")), ConfigError);
  EXPECT_THROW(parse_json_text("{", "x"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/run.json"), ConfigError);
}

TEST(Config, ValidateChecksStages) {
  RunConfig cfg;
  cfg.propagate();
  EXPECT_NO_THROW(cfg.validate());
  cfg.bench.block_sizes = {2, 4};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.model.vocab_size = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.curriculum.mask_only_fraction = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, PropagateSharesSeedAndSchedule) {
  RunConfig cfg;
  cfg.seed = 44;
  cfg.schedule.kind = ScheduleKind::cosine;
  cfg.sampler.block_size = 8;
  cfg.propagate();
  EXPECT_EQ(cfg.curriculum.seed, 44u);
  EXPECT_EQ(cfg.onpolicy.seed, 44u);
  EXPECT_EQ(cfg.distill.sched.kind, ScheduleKind::cosine);
  EXPECT_EQ(cfg.onpolicy.sample.block_size, 8);
}
