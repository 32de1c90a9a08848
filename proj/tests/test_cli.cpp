#include <cstdio>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "rawser/config.hpp"
#include "test_util.hpp"

using namespace rawser;
using rawser::testing::ScratchDir;

namespace {

struct CliRun {
  int code = -1;
  std::string output;
};

CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(RAWSER_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// Small corpus and model so a full LOSO pass takes well under a second per fold.
std::string tiny_config(const std::filesystem::path& dir, int sessions) {
  const std::string text = "[model]\ninput_seconds = 0.5\nbranch_widths_ms = 15, 25\nfilters_per_branch = 2\n"
                           "pooled_frames = 8\nblock = conv2d(2x2,3) pool2d(2x2) lstm(4) dense(8)\n"
                           "[train]\nmax_epochs = 1\nbatch_size = 8\n"
                           "[data]\nmanifest = " + (dir / "corpus" / "manifest.csv").string() +
                           "\n[synth]\nsessions = " + std::to_string(sessions) +
                           "\nutterances_per_speaker = 4\nduration_s = 0.5\n"
                           "[run]\nrepeats = 1\n";
  const auto path = dir / "tiny.cfg";
  write_file(path, text);
  return path.string();
}

}  // namespace

TEST(Cli, UnknownAxisListsValidOnes) {
  ScratchDir dir("cli_axis");
  const CliRun r = run_cli("ablate --axis foo --config " + tiny_config(dir.path(), 2));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("layers, pooling, block"), std::string::npos) << r.output;
}

TEST(Cli, MissingManifestIsAConfigError) {
  ScratchDir dir("cli_manifest");
  const CliRun r = run_cli("eval --config " + tiny_config(dir.path(), 2) + " --out " + (dir / "out").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("not found"), std::string::npos) << r.output;
}

TEST(Cli, BadArguments) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("eval --set train.nonsense=1").code, 2);
  EXPECT_EQ(run_cli("eval --jobs 0").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, Gradcheck) {
  const CliRun r = run_cli("gradcheck --seeds 2");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}

TEST(Cli, SynthPrintsStats) {
  ScratchDir dir("cli_synth");
  const CliRun r = run_cli("synth --config " + tiny_config(dir.path(), 2));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("utterances: 16, speakers: 4"), std::string::npos) << r.output;
  for (const char* name : {"angry", "happy", "neutral", "sad"}) EXPECT_NE(r.output.find(name), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "corpus" / "manifest.csv"));
}

TEST(Cli, EvalWritesOneDirectoryPerFold) {
  ScratchDir dir("cli_eval");
  const std::string cfg = tiny_config(dir.path(), 5);
  ASSERT_EQ(run_cli("synth --config " + cfg).code, 0);
  const auto out = dir / "out";
  const CliRun r = run_cli("eval --config " + cfg + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (int i = 1; i <= 10; ++i) {
    const auto fold = out / (std::string(i < 10 ? "fold_0" : "fold_") + std::to_string(i));
    EXPECT_TRUE(std::filesystem::exists(fold / "result.json")) << fold;
    EXPECT_TRUE(std::filesystem::exists(fold / "history_r01.jsonl")) << fold;
  }
  EXPECT_FALSE(std::filesystem::exists(out / "fold_11"));
  const auto report = nlohmann::json::parse(read_file(out / "report.json"));
  EXPECT_EQ(report.at("folds").size(), 10u);
  // The saved config reproduces the run's settings.
  const RunConfig saved = load_run_config(out / "config.txt");
  EXPECT_EQ(saved.experiment.fingerprint(), report.at("config_fingerprint").get<std::string>());
}

TEST(Cli, TrainOneFold) {
  ScratchDir dir("cli_train");
  const std::string cfg = tiny_config(dir.path(), 2);
  ASSERT_EQ(run_cli("synth --config " + cfg).code, 0);
  const auto out = dir / "out";
  const CliRun r = run_cli("train --fold 2 --config " + cfg + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(std::filesystem::exists(out / "fold_02" / "model.bin"));
  EXPECT_TRUE(std::filesystem::exists(out / "fold_02" / "history.jsonl"));
  EXPECT_EQ(run_cli("train --fold 9 --config " + cfg + " --out " + out.string()).code, 2);
}
