// rawser: corpus synthesis, training, evaluation, analyses and gradient checks.
//
// Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
// 3 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rawser/config.hpp"
#include "rawser/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace rawser;

namespace {

constexpr int kExitGradcheck = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<int> repeats;
  bool desk_scale = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "Config file (key = value, [section] headers)");
  cmd->add_option("--out", a.out, "Output directory (overrides run.out_dir)");
  cmd->add_option("--seed", a.seed, "Base seed (overrides run.seed)");
  cmd->add_option("--jobs", a.jobs, "Parallel folds; 1 is fully sequential")->check(CLI::PositiveNumber);
  cmd->add_option("--repeats", a.repeats, "Training repeats per fold")->check(CLI::PositiveNumber);
  cmd->add_flag("--desk-scale", a.desk_scale, "Use desk-scale size defaults");
  cmd->add_option("--set", a.sets, "Override any key, e.g. --set train.max_epochs=30");
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig c = a.config.empty() ? parse_run_config("", "defaults", a.desk_scale) : load_run_config(a.config, a.desk_scale);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    c.apply(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  if (a.seed) c.experiment.seed = *a.seed;
  if (a.jobs) c.experiment.jobs = *a.jobs;
  if (a.repeats) c.experiment.repeats = *a.repeats;
  if (!a.out.empty()) c.out_dir = a.out;
  c.validate();
  return c;
}

fs::path prepare_out(const RunConfig& c) {
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_file(out / "config.txt", c.to_text());
  return out;
}

void write_text(const fs::path& p, const std::string& s) { write_file(p, s); }

std::string fold_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fold_%02zu", i + 1);
  return buf;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::string s;
  for (const auto& r : history) s += to_json(r).dump() + "\n";
  write_text(path, s);
}

CorpusManifest load_corpus(const RunConfig& c) {
  if (!fs::exists(c.manifest)) {
    throw ConfigError("manifest '" + c.manifest + "' not found; run 'rawser synth' first or set data.manifest");
  }
  return load_manifest(c.manifest);
}

// --------------------------------------------------------------------------

int cmd_synth(const RunConfig& c) {
  const fs::path dir = fs::path(c.manifest).parent_path().empty() ? fs::path(".") : fs::path(c.manifest).parent_path();
  const CorpusManifest m = generate_synthetic(c.synth, c.experiment.seed, dir);
  if (fs::path(c.manifest).filename() != "manifest.csv") save_manifest(m, c.manifest);
  std::map<std::string, int> speakers;
  std::vector<int> per_class(kEmotionNames.size(), 0);
  for (const auto& r : m.records) {
    ++speakers[r.speaker];
    ++per_class[static_cast<std::size_t>(r.label_index())];
  }
  std::cout << "manifest: " << c.manifest << "\n";
  std::cout << "utterances: " << m.size() << ", speakers: " << speakers.size() << ", sessions: " << c.synth.sessions
            << "\n";
  std::cout << "class     utterances\n";
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-9s %d\n", kEmotionNames[k], per_class[k]);
    std::cout << buf;
  }
  return 0;
}

int cmd_train(const RunConfig& c, int fold_index) {
  const fs::path out = prepare_out(c);
  const ExperimentConfig& e = c.experiment;
  const LosoInputs in = prepare_loso(e, load_corpus(c));
  if (fold_index < 1 || static_cast<std::size_t>(fold_index) > in.folds.size()) {
    throw ConfigError("--fold must lie in 1.." + std::to_string(in.folds.size()));
  }
  const std::size_t fi = static_cast<std::size_t>(fold_index - 1);
  const LosoFold& fold = in.folds[fi];
  const auto samples = in.audio->windowed(e.model.input_seconds);
  const Dataset train = make_dataset(in.manifest, samples, fold.train);
  const Dataset val = make_dataset(in.manifest, samples, fold.val);
  const Dataset test = make_dataset(in.manifest, samples, fold.test);
  const fs::path dir = out / fold_dir_name(fi);
  fs::create_directories(dir);
  std::ofstream log(dir / "history.jsonl");
  const std::uint64_t seed = e.seed + 1000ull * fi;
  TrainRunResult run = train_fold(e.model, e.train, train, val, seed, &log);
  run.model.save(dir / "model.bin");
  const ConfusionMatrix cm = evaluate(run.model, test);
  nlohmann::json j{{"config_fingerprint", e.fingerprint()},
                   {"test_speaker", fold.test_speaker},
                   {"val_speaker", fold.val_speaker},
                   {"seed", seed},
                   {"best_epoch", run.best_epoch},
                   {"best_val_uar", run.best_val_uar},
                   {"epochs_run", run.history.size()},
                   {"final_train_uar", run.history.back().train_uar},
                   {"test_uar", uar(cm)},
                   {"test_confusion", cm_to_json(cm)}};
  write_text(dir / "result.json", j.dump(2) + "\n");
  std::cout << "fold " << fold_index << " (test " << fold.test_speaker << "): best epoch " << run.best_epoch
            << ", val UAR " << format_double(run.best_val_uar) << ", test UAR " << format_double(uar(cm)) << "\n";
  std::cout << "artifacts: " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const LosoInputs in = prepare_loso(c.experiment, load_corpus(c));
  for (std::size_t i = 0; i < in.folds.size(); ++i) fs::create_directories(out / fold_dir_name(i));
  auto observer = [&](std::size_t fi, int rep, const TrainRunResult& run) {
    char name[32];
    std::snprintf(name, sizeof name, "history_r%02d.jsonl", rep + 1);
    write_history(out / fold_dir_name(fi) / name, run.history);
  };
  const EvalReport report = run_loso(c.experiment, in, "loso", log_line, observer);
  for (std::size_t i = 0; i < report.folds.size(); ++i) {
    write_text(out / fold_dir_name(i) / "result.json", to_json(report.folds[i]).dump(2) + "\n");
  }
  write_text(out / "report.json", to_json(report).dump(2) + "\n");
  const std::string table = format_report(report);
  write_text(out / "report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_ablate(const RunConfig& c, const std::string& axis) {
  const fs::path out = prepare_out(c);
  const CorpusManifest m = load_corpus(c);
  AblationReport rep;
  if (axis == "layers") rep = ablate_parallel_layers(c.experiment, m, log_line);
  else if (axis == "pooling") rep = ablate_pooling(c.experiment, m, log_line);
  else if (axis == "block") rep = ablate_block(c.experiment, m, log_line);
  else throw ConfigError("unknown axis '" + axis + "' (valid: layers, pooling, block)");
  write_text(out / ("ablation_" + axis + ".json"), to_json(rep).dump(2) + "\n");
  const std::string table = format_table(rep);
  write_text(out / ("ablation_" + axis + ".txt"), table);
  std::cout << table;
  return 0;
}

int cmd_sweep(const RunConfig& c) {
  const fs::path out = prepare_out(c);
  const AblationReport rep = sweep_input_length(c.experiment, load_corpus(c), c.sweep_lengths, log_line);
  write_text(out / "sweep_length.json", to_json(rep).dump(2) + "\n");
  write_text(out / "sweep_length.tsv", format_series(rep));
  const std::string table = format_table(rep);
  write_text(out / "sweep_length.txt", table);
  std::cout << table;
  return 0;
}

int cmd_gradcheck(int seeds) {
  const GradCheckReport r = run_gradcheck_suite(seeds);
  for (const auto& c : r.components) {
    std::printf("%-30s seeds=%-3d max_rel_error=%.3e  checked=%-6zu kinks_skipped=%-5zu %s\n", c.name.c_str(), c.seeds,
                c.max_rel_error, c.checked, c.kinks_skipped, c.passed() ? "PASS" : "FAIL");
  }
  std::printf("%zu components, tolerance %.0e, %.1f s: %s\n", r.components.size(), kGradCheckTolerance, r.seconds,
              r.passed() ? "PASS" : "FAIL");
  return r.passed() ? 0 : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Raw-waveform speech emotion recognition with parallel multi-width convolutions"};
  app.require_subcommand(1);

  CommonArgs synth_a, train_a, eval_a, ablate_a, sweep_a;
  int fold = 1;
  std::string axis;
  int gc_seeds = 10;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
  add_common(synth, synth_a);
  auto* train = app.add_subcommand("train", "Train one leave-one-speaker-out fold");
  add_common(train, train_a);
  train->add_option("--fold", fold, "Fold index, 1-based")->check(CLI::PositiveNumber);
  auto* eval = app.add_subcommand("eval", "Full leave-one-speaker-out evaluation");
  add_common(eval, eval_a);
  auto* ablate = app.add_subcommand("ablate", "Run one analysis axis");
  add_common(ablate, ablate_a);
  ablate->add_option("--axis", axis, "layers, pooling or block")->required();
  auto* sweep = app.add_subcommand("sweep", "Input-length sweep");
  add_common(sweep, sweep_a);
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--seeds", gc_seeds, "Random seeds per component")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  const auto start = std::chrono::steady_clock::now();
  int rc = 0;
  try {
    if (*synth) rc = cmd_synth(resolve(synth_a));
    else if (*train) rc = cmd_train(resolve(train_a), fold);
    else if (*eval) rc = cmd_eval(resolve(eval_a));
    else if (*ablate) {
      if (axis != "layers" && axis != "pooling" && axis != "block") {
        throw ConfigError("unknown axis '" + axis + "' (valid: layers, pooling, block)");
      }
      rc = cmd_ablate(resolve(ablate_a), axis);
    } else if (*sweep) rc = cmd_sweep(resolve(sweep_a));
    else if (*gradcheck) rc = cmd_gradcheck(gc_seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cerr << "elapsed " << format_double(std::round(secs * 10.0) / 10.0) << " s\n";
  return rc;
}
