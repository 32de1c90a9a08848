// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "rawser/config.hpp"
#include "rawser/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace rawser;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

class Scratch {
 public:
  Scratch() : path_(fs::temp_directory_path() / ("rawser_acceptance_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RAWSER_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Tensor random_tensor(Shape s, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const GradCheckReport r = run_gradcheck_suite(10);
  double worst = 0.0;
  std::string worst_name;
  bool seeds_ok = true;
  for (const auto& c : r.components) {
    seeds_ok = seeds_ok && c.seeds >= 10;
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
  }
  const bool pass = r.passed() && seeds_ok && r.seconds < 120.0 && !r.components.empty();
  return {pass, std::to_string(r.components.size()) + " components x 10 seeds, worst " + fmt("%.2e", worst) + " (" +
                    worst_name + "), " + fmt("%.1f s", r.seconds)};
}

Outcome conv_fidelity() {
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 6), len(8, 40);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t batch = dim(rng), n = dim(rng), k = dim(rng), stride = dim(rng), t = len(rng);
    Tensor x = random_tensor({batch, t}, rng), w = random_tensor({n, k}, rng), b = random_tensor({n}, rng);
    Tensor y = conv1d(x, w, b, stride);
    const std::size_t t_out = (t - k) / stride + 1;
    if (y.shape() != Shape{batch, n, t_out}) return {false, "output shape mismatch on trial " + std::to_string(trial)};
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t tt = 1; tt <= t_out; ++tt) {
          double s = b[i];
          for (std::size_t kk = 1; kk <= k; ++kk) s += w[i * k + kk - 1] * x[bi * t + stride * (tt - 1) + kk - 1];
          worst = std::max(worst, std::abs(y[(bi * n + i) * t_out + tt - 1] - s));
        }
  }
  ModelConfig full;
  std::vector<std::size_t> lengths;
  for (double ms : full.branch_widths_ms)
    lengths.push_back(conv_output_length(full.input_samples(), ms_to_samples(ms, full.sample_rate), full.stride_samples()));
  const bool lengths_ok = lengths == std::vector<std::size_t>{599, 598, 591};
  return {worst <= 1e-12 && lengths_ok, "max |conv - oracle| " + fmt("%.1e", worst) + " over 100 instances, T_out " +
                                            std::to_string(lengths[0]) + "/" + std::to_string(lengths[1]) + "/" +
                                            std::to_string(lengths[2])};
}

Outcome uar_oracle() {
  Rng rng(31);
  std::uniform_int_distribution<std::size_t> classes(2, 8);
  std::uniform_int_distribution<int> count(0, 30), scale(1, 40);
  double worst_oracle = 0.0, worst_scaling = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = classes(rng);
    ConfusionMatrix cm(k);
    for (auto& v : cm.counts) v = count(rng);
    for (std::size_t i = 0; i < k; ++i) cm.at(i, i) += 1;
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < k; ++j) row += static_cast<double>(cm.counts[i * k + j]);
      sum += static_cast<double>(cm.counts[i * k + i]) / row;
    }
    const double u = uar(cm);
    worst_oracle = std::max(worst_oracle, std::abs(u - sum / static_cast<double>(k)));
    ConfusionMatrix scaled = cm;
    for (std::size_t i = 0; i < k; ++i) {
      const int s = scale(rng);
      for (std::size_t j = 0; j < k; ++j) scaled.at(i, j) *= s;
    }
    worst_scaling = std::max(worst_scaling, std::abs(uar(scaled) - u));
  }
  return {worst_oracle <= 1e-12 && worst_scaling <= 1e-12,
          "1000 matrices, oracle gap " + fmt("%.1e", worst_oracle) + ", row-scaling gap " + fmt("%.1e", worst_scaling)};
}

Outcome schedule_machine() {
  // A run whose validation UAR never moves from its starting value.
  ScheduleState s;
  s.best_val_uar = 0.4;
  OptimizerState opt;
  opt.learning_rate = 1e-4;
  std::vector<int> halves;
  int stop = 0;
  bool lr_exact = true;
  for (int epoch = 1; epoch <= 40 && !stop; ++epoch) {
    const ScheduleDecision d = schedule_update(s, 0.4);
    apply_schedule(d, opt);
    if (d == ScheduleDecision::Halve) halves.push_back(epoch);
    if (d == ScheduleDecision::Stop) stop = epoch;
    lr_exact = lr_exact && opt.learning_rate == std::ldexp(1e-4, -s.halvings_applied);
  }
  OptimizerState more;
  more.learning_rate = 1e-4;
  for (int k = 1; k <= 30; ++k) {
    apply_schedule(ScheduleDecision::Halve, more);
    lr_exact = lr_exact && more.learning_rate == std::ldexp(1e-4, -k);
  }
  lr_exact = lr_exact && std::ldexp(1e-4, -2) == 2.5e-5;
  const bool pass = halves == std::vector<int>{5, 10, 15} && stop == 20 && lr_exact;
  std::string h;
  for (int e : halves) h += (h.empty() ? "" : "/") + std::to_string(e);
  return {pass, "halvings at " + h + ", stop at " + std::to_string(stop) + ", lr 1e-4*2^-k bit-exact for k<=30: " +
                    (lr_exact ? "yes" : "no")};
}

Outcome end_to_end(const fs::path& dir) {
  const auto start = Clock::now();
  const RunConfig c = parse_run_config("", "defaults", true);
  const CorpusManifest m = generate_synthetic(c.synth, c.experiment.seed, dir / "corpus");
  std::set<std::string> speakers;
  for (const auto& r : m.records) speakers.insert(r.speaker);
  ExperimentConfig e = c.experiment;
  e.jobs = 1;
  // Earliest epoch at which the first fold's first repeat reaches train UAR 0.95.
  int first_fold_epoch = 0;
  double first_fold_best = 0.0;
  int folds_reaching = 0;
  auto observer = [&](std::size_t fold, int rep, const TrainRunResult& run) {
    int reached = 0;
    for (const auto& rec : run.history) {
      if (rec.epoch > 50) break;
      if (rec.train_uar >= 0.95) {
        reached = rec.epoch;
        break;
      }
    }
    if (reached && rep == 0) ++folds_reaching;
    if (fold == 0 && rep == 0) {
      first_fold_epoch = reached;
      for (const auto& rec : run.history) first_fold_best = std::max(first_fold_best, rec.train_uar);
    }
  };
  auto progress = [](const std::string& s) { std::cerr << "  " << s << std::endl; };
  const EvalReport r = run_loso(e, prepare_loso(e, m), "acceptance", progress, observer);
  const double secs = seconds_since(start);
  const bool pass = speakers.size() == 10 && first_fold_epoch > 0 && r.pooled_uar >= 0.85 && r.repeat_mean >= 0.85 &&
                    secs < 1800.0;
  std::string pooled;
  for (double u : r.repeat_pooled_uars) pooled += (pooled.empty() ? "" : ", ") + fmt("%.4f", u);
  return {pass, std::to_string(speakers.size()) + " speakers; fold 1 train UAR " +
                    (first_fold_epoch ? ">= 0.95 at epoch " + std::to_string(first_fold_epoch)
                                      : "peaked at " + fmt("%.3f", first_fold_best)) +
                    " (" + std::to_string(folds_reaching) + "/10 folds reach it); pooled UAR " +
                    fmt("%.4f", r.pooled_uar) + " (ensemble), per-repeat pooled [" + pooled + "] mean " +
                    fmt("%.4f", r.repeat_mean) + "; fold mean " + format_uar(r.fold_mean, r.fold_std) + "; " +
                    fmt("%.0f s", secs) + " single-threaded"};
}

std::string tiny_config(const fs::path& dir) {
  fs::create_directories(dir);
  const std::string text = "[model]\ninput_seconds = 0.5\nbranch_widths_ms = 15, 25, 100\nfilters_per_branch = 4\n"
                           "pooled_frames = 8\nblock = conv2d(2x2,3) pool2d(2x2) lstm(4) dense(8)\n"
                           "[train]\nmax_epochs = 2\nbatch_size = 8\n"
                           "[data]\nmanifest = " + (dir / "corpus" / "manifest.csv").string() +
                           "\n[synth]\nsessions = 2\nutterances_per_speaker = 4\nduration_s = 0.5\n"
                           "[run]\nrepeats = 2\n";
  write_file(dir / "tiny.cfg", text);
  return (dir / "tiny.cfg").string();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files[fs::relative(entry.path(), dir).string()] = read_file(entry.path());
  return files;
}

Outcome determinism(const fs::path& dir) {
  const std::string cfg = tiny_config(dir);
  if (run_cli("synth --config " + cfg) != 0) return {false, "synth failed"};
  const fs::path out = dir / "eval";
  const std::string cmd = "eval --jobs 1 --config " + cfg + " --out " + out.string();
  if (run_cli(cmd) != 0) return {false, "first eval failed"};
  const auto first = snapshot(out);
  fs::remove_all(out);
  if (run_cli(cmd) != 0) return {false, "second eval failed"};
  const auto second = snapshot(out);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first) {
    auto it = second.find(name);
    if (it == second.end() || it->second != bytes) ++differing;
  }
  const bool pass = !first.empty() && first.size() == second.size() && differing == 0 && first.count("report.json");
  return {pass, std::to_string(first.size()) + " output files compared, " + std::to_string(differing) + " differ"};
}

Outcome harness_shapes(const fs::path& dir) {
  const std::string cfg = tiny_config(dir);
  if (!fs::exists(dir / "corpus" / "manifest.csv") && run_cli("synth --config " + cfg) != 0) return {false, "synth failed"};
  const std::string common = " --repeats 1 --set train.max_epochs=1 --config " + cfg + " --out " + (dir / "ablate").string();
  const std::regex cell(R"(^\d+\.\d{2}±\d+\.\d$)");
  std::string summary;
  bool pass = true;
  auto check = [&](const std::string& file, std::size_t rows, const std::vector<std::string>& labels) {
    const auto j = nlohmann::json::parse(read_file(dir / "ablate" / file));
    bool ok = j.at("rows").size() == rows;
    for (std::size_t i = 0; ok && i < rows; ++i) {
      const auto& row = j["rows"][i];
      ok = std::regex_match(row.at("formatted").get<std::string>(), cell) &&
           (labels.empty() || row.at("label").get<std::string>() == labels[i]);
    }
    summary += (summary.empty() ? "" : ", ") + j.at("axis").get<std::string>() + " " + std::to_string(j["rows"].size());
    pass = pass && ok;
  };
  for (const std::string axis : {"layers", "pooling", "block"}) {
    if (run_cli("ablate --axis " + axis + common) != 0) return {false, "ablate " + axis + " failed"};
  }
  if (run_cli("sweep" + common) != 0) return {false, "sweep failed"};
  check("ablation_layers.json", 4, {"1", "2", "3", "4"});
  check("ablation_pooling.json", 3, {"max", "l2", "Average"});
  std::vector<std::string> blocks;
  for (const auto& [kind, name] : block_kinds()) blocks.push_back(name);
  check("ablation_block.json", 7, blocks);
  check("sweep_length.json", 6, {"1", "2", "3", "4", "5", "6"});
  return {pass, summary + " rows, every cell formatted like 60.23±3.2"};
}

Outcome augmentation_arithmetic(const fs::path& dir) {
  Rng rng(8);
  std::uniform_int_distribution<std::size_t> len(1, 200000);
  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = len(rng);
    const Waveform w{std::vector<double>(n, 0.25), 16000};
    for (double f : {0.9, 1.1}) {
      const auto expect = static_cast<std::size_t>(std::llround(static_cast<double>(n) / f));
      if (speed_perturb(w, f).samples.size() != expect) ++mismatches;
    }
  }
  SynthSpec spec;
  spec.duration_s = 0.1;
  spec.edge_silence_s = 0.01;
  const CorpusManifest m = generate_synthetic(spec, 4, dir / "aug_corpus");
  const CorpusManifest a = augment_manifest(m, {0.9, 1.1});
  std::size_t leaked = 0, scanned = 0;
  for (const auto& f : loso_folds(a)) {
    for (const auto& part : {f.val, f.test})
      for (std::size_t i : part) {
        ++scanned;
        if (!a.records[i].augmentation.original) ++leaked;
      }
  }
  const bool pass = mismatches == 0 && a.size() == 3 * m.size() && leaked == 0;
  return {pass, std::to_string(mismatches) + " length mismatches over 200 cases; manifest " + std::to_string(m.size()) +
                    " -> " + std::to_string(a.size()) + "; " + std::to_string(leaked) + " augmented of " +
                    std::to_string(scanned) + " val/test records"};
}

}  // namespace

// Optional arguments pick criteria by number; no arguments runs all of them.
int main(int argc, char** argv) {
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  Scratch scratch;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"conv1d fidelity", conv_fidelity},
      {"UAR oracle", uar_oracle},
      {"schedule state machine", schedule_machine},
      {"end-to-end learning", [&] { return end_to_end(scratch.path() / "e2e"); }},
      {"determinism", [&] { return determinism(scratch.path() / "det"); }},
      {"harness shape fidelity", [&] { return harness_shapes(scratch.path() / "shape"); }},
      {"augmentation arithmetic", [&] { return augmentation_arithmetic(scratch.path() / "aug"); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, run] = criteria[i];
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << "criterion " << i + 1 << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << " (" << o.detail << ")"
              << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
