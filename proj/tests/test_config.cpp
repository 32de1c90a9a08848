#include <gtest/gtest.h>

#include "rawser/config.hpp"
#include "test_util.hpp"

using namespace rawser;
using rawser::testing::ScratchDir;

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c;
  EXPECT_EQ(parse_run_config(c.to_text()), c);
  EXPECT_EQ(parse_run_config(c.to_text()).to_text(), c.to_text());
}

TEST(Config, EditedValuesRoundTrip) {
  RunConfig c;
  c.apply("model.block", "lstm(8) dense(16)");
  c.apply("model.branch_widths_ms", "25, 100");
  c.apply("model.pool_mode", "l2");
  c.apply("train.learning_rate", "3e-4");
  c.apply("data.augment_factors", "0.8, 1.2");
  c.apply("data.window_mode", "pad-zero");
  c.apply("synth.noise_level", "0.125");
  c.apply("run.repeats", "4");
  c.apply("run.out_dir", "results/a");
  const RunConfig back = parse_run_config(c.to_text());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.experiment.model.branch_widths_ms, (std::vector<double>{25, 100}));
  EXPECT_EQ(back.experiment.train.learning_rate, 3e-4);
  EXPECT_EQ(back.experiment.fingerprint(), c.experiment.fingerprint());
}

TEST(Config, SectionsAndComments) {
  const RunConfig c = parse_run_config("# comment\n[train]\nmax_epochs = 7\n\n[run]\nseed = 42\n");
  EXPECT_EQ(c.experiment.train.max_epochs, 7);
  EXPECT_EQ(c.experiment.seed, 42u);
}

TEST(Config, UnknownKeyIsAnError) {
  try {
    parse_run_config("[train]\nmax_epoch = 7\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.max_epoch"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_run_config("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train]\nbatch_size = zero\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train]\nbatch_size = 0\n"), ConfigError);
}

TEST(Config, DeskScaleSwitchesAllSizes) {
  const RunConfig d = parse_run_config("", "defaults", true);
  EXPECT_TRUE(d.desk_scale);
  EXPECT_EQ(d.experiment.model.filters_per_branch, 8u);
  EXPECT_EQ(d.experiment.model.pooled_frames, 16u);
  EXPECT_EQ(d.experiment.model.input_seconds, 2.0);
  EXPECT_EQ(d.experiment.repeats, 3);
  EXPECT_EQ(d.sweep_lengths.size(), 6u);
  const RunConfig full;
  EXPECT_EQ(full.experiment.model.filters_per_branch, 40u);
  EXPECT_EQ(full.experiment.model.pooled_frames, 64u);
  EXPECT_EQ(full.experiment.model.input_seconds, 6.0);
  EXPECT_EQ(full.experiment.repeats, 10);
}

TEST(Config, ExplicitValuesBeatDeskScale) {
  // The flag line comes last but is applied first.
  const RunConfig c = parse_run_config("[model]\npooled_frames = 12\n[run]\ndesk_scale = true\n");
  EXPECT_TRUE(c.desk_scale);
  EXPECT_EQ(c.experiment.model.pooled_frames, 12u);
  EXPECT_EQ(c.experiment.model.filters_per_branch, 8u);
  EXPECT_EQ(parse_run_config(c.to_text()), c);
}

TEST(Config, Validation) {
  RunConfig c;
  c.apply("synth.sample_rate", "8000");
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig d;
  d.apply("data.augment_factors", "0.9, -1");
  EXPECT_THROW(d.validate(), ConfigError);
  RunConfig e;
  EXPECT_THROW(e.apply("model.pooled_frames", "0"), ConfigError);
  EXPECT_THROW(e.apply("data.window_mode", "pad"), ConfigError);
  RunConfig ok;
  EXPECT_NO_THROW(ok.validate());
}

TEST(Config, LoadFromFile) {
  ScratchDir dir("config");
  write_file(dir / "run.cfg", "[run]\nrepeats = 2\n");
  EXPECT_EQ(load_run_config(dir / "run.cfg").experiment.repeats, 2);
  EXPECT_THROW(load_run_config(dir / "missing.cfg"), ConfigError);
}
