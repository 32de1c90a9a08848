// Leave-one-speaker-out experiments, their reports, and the four analysis
// harnesses: branch count, pooling mode, classification block and input
// length.
#pragma once

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "rawser/corpus.hpp"
#include "rawser/training.hpp"

namespace rawser {

struct PreprocessOptions {
  bool trim = true;
  double trim_threshold_db = -40.0;
  double trim_frame_ms = 25.0;
  WindowMode window_mode = WindowMode::CropCenter;

  friend bool operator==(const PreprocessOptions&, const PreprocessOptions&) = default;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainOptions train;
  PreprocessOptions preprocess;
  std::vector<double> augment_factors = {0.9, 1.1};
  int repeats = 10;
  std::uint64_t seed = 1;
  bool same_seed = false;
  int jobs = 1;

  /// Canonical text of every field that affects numerics (jobs excluded).
  std::string canonical_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : model.to_entries()) os << k << " = " << v << '\n';
    os << "train.batch_size = " << train.batch_size << '\n'
       << "train.max_epochs = " << train.max_epochs << '\n'
       << "train.learning_rate = " << format_double(train.learning_rate) << '\n'
       << "train.rho = " << format_double(train.rho) << '\n'
       << "train.epsilon = " << format_double(train.epsilon) << '\n'
       << "train.halve_patience = " << train.halve_patience << '\n'
       << "train.stop_patience = " << train.stop_patience << '\n'
       << "train.clip_norm = " << format_double(train.clip_norm) << '\n'
       << "data.trim = " << (preprocess.trim ? "true" : "false") << '\n'
       << "data.trim_threshold_db = " << format_double(preprocess.trim_threshold_db) << '\n'
       << "data.trim_frame_ms = " << format_double(preprocess.trim_frame_ms) << '\n'
       << "data.window_mode = " << to_string(preprocess.window_mode) << '\n'
       << "data.augment_factors = " << join_doubles(augment_factors) << '\n'
       << "run.repeats = " << repeats << '\n'
       << "run.seed = " << seed << '\n'
       << "run.same_seed = " << (same_seed ? "true" : "false") << '\n';
    return os.str();
  }

  std::string fingerprint() const { return rawser::fingerprint(canonical_text()); }
};

// ---------------------------------------------------------------------------
// Audio loading
// ---------------------------------------------------------------------------

/// Decoded, trimmed and speed-perturbed audio for every manifest record,
/// loaded once and windowed on demand.
class AudioStore {
 public:
  AudioStore(const CorpusManifest& m, const PreprocessOptions& opt, int expected_rate) {
    std::map<std::string, Waveform> originals;
    waves_.reserve(m.records.size());
    for (const auto& r : m.records) {
      auto it = originals.find(r.path);
      if (it == originals.end()) {
        Waveform w = read_wav(m.resolve(r));
        if (w.sample_rate != expected_rate) {
          throw AudioError("'" + r.path + "' has sample rate " + std::to_string(w.sample_rate) + ", model expects " +
                           std::to_string(expected_rate) + " (resampling is not supported)");
        }
        if (opt.trim) w = trim_nonspeech(w, opt.trim_threshold_db, opt.trim_frame_ms);
        it = originals.emplace(r.path, std::move(w)).first;
      }
      waves_.push_back(r.augmentation.original ? it->second : speed_perturb(it->second, r.augmentation.factor));
    }
    mode_ = opt.window_mode;
  }

  /// Fixed-length sample vectors, one per record.
  std::vector<std::vector<double>> windowed(double seconds) const {
    std::vector<std::vector<double>> out;
    out.reserve(waves_.size());
    for (const auto& w : waves_) out.push_back(fixed_window(w, seconds, mode_).samples);
    return out;
  }

  std::size_t size() const { return waves_.size(); }

 private:
  std::vector<Waveform> waves_;
  WindowMode mode_ = WindowMode::CropCenter;
};

inline Dataset make_dataset(const CorpusManifest& m, const std::vector<std::vector<double>>& samples,
                            const std::vector<std::size_t>& idx) {
  Dataset d;
  d.reserve(idx.size());
  for (std::size_t i : idx) d.push_back({&samples[i], m.records[i].label_index()});
  return d;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct FoldResult {
  std::string session;
  std::string test_speaker;
  std::string val_speaker;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> repeat_uars;
  std::vector<ConfusionMatrix> repeat_cms;
  std::vector<int> best_epochs;
  std::vector<int> epochs_run;
  double mean_uar = 0.0;  // over repeats
  double std_uar = 0.0;
  double ensemble_uar = 0.0;
  ConfusionMatrix ensemble_cm;
  std::vector<std::size_t> zero_support;
};

struct EvalReport {
  std::string label;
  std::string fingerprint;
  std::string config_text;
  std::vector<FoldResult> folds;
  // Across folds, of each fold's mean-over-repeats UAR (headline).
  double fold_mean = 0.0;
  double fold_std = 0.0;
  // Across repeats, of each repeat's pooled (fold-summed) UAR.
  std::vector<double> repeat_pooled_uars;
  double repeat_mean = 0.0;
  double repeat_std = 0.0;
  // Summed ensemble confusion matrices over all folds.
  ConfusionMatrix pooled_cm;
  double pooled_uar = 0.0;
  std::vector<std::size_t> zero_support;
};

/// Recomputes every aggregate from the per-fold entries.
inline void aggregate(EvalReport& r) {
  if (r.folds.empty()) throw Error("aggregate: report has no folds");
  std::vector<double> fold_means;
  const std::size_t k = r.folds.front().ensemble_cm.n;
  const std::size_t repeats = r.folds.front().repeat_cms.size();
  r.pooled_cm = ConfusionMatrix(k);
  std::vector<ConfusionMatrix> per_repeat(repeats, ConfusionMatrix(k));
  for (const auto& f : r.folds) {
    fold_means.push_back(f.mean_uar);
    r.pooled_cm += f.ensemble_cm;
    if (f.repeat_cms.size() != repeats) throw Error("aggregate: folds disagree on repeat count");
    for (std::size_t i = 0; i < repeats; ++i) per_repeat[i] += f.repeat_cms[i];
  }
  const auto fs = mean_std(fold_means);
  r.fold_mean = fs.mean;
  r.fold_std = fs.std;
  r.repeat_pooled_uars.clear();
  for (const auto& cm : per_repeat) r.repeat_pooled_uars.push_back(uar(cm));
  const auto rs = mean_std(r.repeat_pooled_uars);
  r.repeat_mean = rs.mean;
  r.repeat_std = rs.std;
  r.pooled_uar = uar(r.pooled_cm);
  r.zero_support = zero_support_classes(r.pooled_cm);
}

inline nlohmann::json cm_to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < cm.n; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < cm.n; ++j) row.push_back(cm.at(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline ConfusionMatrix cm_from_json(const nlohmann::json& j) {
  ConfusionMatrix cm(j.size());
  for (std::size_t i = 0; i < cm.n; ++i) {
    if (j[i].size() != cm.n) throw SerializationError("confusion matrix is not square");
    for (std::size_t c = 0; c < cm.n; ++c) cm.at(i, c) = j[i][c].get<std::int64_t>();
  }
  return cm;
}

inline nlohmann::json to_json(const FoldResult& f) {
  nlohmann::json j;
  j["session"] = f.session;
  j["test_speaker"] = f.test_speaker;
  j["val_speaker"] = f.val_speaker;
  j["n_train"] = f.n_train;
  j["n_val"] = f.n_val;
  j["n_test"] = f.n_test;
  j["seeds"] = f.seeds;
  j["repeat_uars"] = f.repeat_uars;
  j["repeat_confusion"] = nlohmann::json::array();
  for (const auto& cm : f.repeat_cms) j["repeat_confusion"].push_back(cm_to_json(cm));
  j["best_epochs"] = f.best_epochs;
  j["epochs_run"] = f.epochs_run;
  j["mean_uar"] = f.mean_uar;
  j["std_uar"] = f.std_uar;
  j["ensemble_uar"] = f.ensemble_uar;
  j["ensemble_confusion"] = cm_to_json(f.ensemble_cm);
  j["zero_support_classes"] = f.zero_support;
  return j;
}

inline FoldResult fold_from_json(const nlohmann::json& j) {
  FoldResult f;
  f.session = j.at("session");
  f.test_speaker = j.at("test_speaker");
  f.val_speaker = j.at("val_speaker");
  f.n_train = j.at("n_train");
  f.n_val = j.at("n_val");
  f.n_test = j.at("n_test");
  f.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  f.repeat_uars = j.at("repeat_uars").get<std::vector<double>>();
  for (const auto& cm : j.at("repeat_confusion")) f.repeat_cms.push_back(cm_from_json(cm));
  f.best_epochs = j.at("best_epochs").get<std::vector<int>>();
  f.epochs_run = j.at("epochs_run").get<std::vector<int>>();
  f.mean_uar = j.at("mean_uar");
  f.std_uar = j.at("std_uar");
  f.ensemble_uar = j.at("ensemble_uar");
  f.ensemble_cm = cm_from_json(j.at("ensemble_confusion"));
  f.zero_support = j.at("zero_support_classes").get<std::vector<std::size_t>>();
  return f;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["config_fingerprint"] = r.fingerprint;
  j["config"] = r.config_text;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds) j["folds"].push_back(to_json(f));
  j["fold_mean_uar"] = r.fold_mean;
  j["fold_std_uar"] = r.fold_std;
  j["repeat_pooled_uars"] = r.repeat_pooled_uars;
  j["repeat_mean_uar"] = r.repeat_mean;
  j["repeat_std_uar"] = r.repeat_std;
  j["pooled_confusion"] = cm_to_json(r.pooled_cm);
  j["pooled_uar"] = r.pooled_uar;
  j["zero_support_classes"] = r.zero_support;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.label = j.at("label");
  r.fingerprint = j.at("config_fingerprint");
  r.config_text = j.at("config");
  for (const auto& f : j.at("folds")) r.folds.push_back(fold_from_json(f));
  r.fold_mean = j.at("fold_mean_uar");
  r.fold_std = j.at("fold_std_uar");
  r.repeat_pooled_uars = j.at("repeat_pooled_uars").get<std::vector<double>>();
  r.repeat_mean = j.at("repeat_mean_uar");
  r.repeat_std = j.at("repeat_std_uar");
  r.pooled_cm = cm_from_json(j.at("pooled_confusion"));
  r.pooled_uar = j.at("pooled_uar");
  r.zero_support = j.at("zero_support_classes").get<std::vector<std::size_t>>();
  return r;
}

/// "60.23±3.2": percentage with two decimals, spread with one.
inline std::string format_uar(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.1f", 100.0 * mean, 100.0 * std);
  return buf;
}

// ---------------------------------------------------------------------------
// LOSO runner
// ---------------------------------------------------------------------------

using ProgressFn = std::function<void(const std::string&)>;

/// Per-fold artifact hook: (fold index, repeat index, finished run).
using RunObserver = std::function<void(std::size_t, int, const TrainRunResult&)>;

struct LosoInputs {
  CorpusManifest manifest;  // augmented when the config asks for it
  std::vector<LosoFold> folds;
  std::shared_ptr<const AudioStore> audio;
};

inline LosoInputs prepare_loso(const ExperimentConfig& cfg, const CorpusManifest& manifest,
                               std::shared_ptr<const AudioStore> audio = nullptr) {
  LosoInputs in;
  in.manifest = (!cfg.augment_factors.empty() && !manifest.has_augmented())
                    ? augment_manifest(manifest, cfg.augment_factors)
                    : manifest;
  in.folds = loso_folds(in.manifest);
  in.audio = audio ? std::move(audio)
                   : std::make_shared<const AudioStore>(in.manifest, cfg.preprocess, cfg.model.sample_rate);
  if (in.audio->size() != in.manifest.size()) throw Error("prepare_loso: audio store does not match manifest");
  return in;
}

inline EvalReport run_loso(const ExperimentConfig& cfg, const LosoInputs& in, const std::string& label = "loso",
                           const ProgressFn& progress = nullptr, const RunObserver& observer = nullptr) {
  Model::validate(cfg.model);
  const auto samples = in.audio->windowed(cfg.model.input_seconds);
  EvalReport report;
  report.label = label;
  report.config_text = cfg.canonical_text();
  report.fingerprint = cfg.fingerprint();
  report.folds.resize(in.folds.size());

  auto run_fold = [&](std::size_t fi) {
    const LosoFold& fold = in.folds[fi];
    const Dataset train = make_dataset(in.manifest, samples, fold.train);
    const Dataset val = make_dataset(in.manifest, samples, fold.val);
    const Dataset test = make_dataset(in.manifest, samples, fold.test);
    // Fold-specific seed block keeps folds independent of scheduling order.
    const std::uint64_t seed = cfg.seed + 1000ull * fi;
    auto on_run = [&](int rep, const TrainRunResult& run) {
      if (observer) observer(fi, rep, run);
    };
    RepeatResult rr = repeat_and_aggregate(cfg.model, cfg.train, train, val, test, cfg.repeats, seed, cfg.same_seed, on_run);
    FoldResult f;
    f.session = fold.session;
    f.test_speaker = fold.test_speaker;
    f.val_speaker = fold.val_speaker;
    f.n_train = train.size();
    f.n_val = val.size();
    f.n_test = test.size();
    f.seeds = rr.seeds;
    f.repeat_uars = rr.test_uars;
    f.repeat_cms = rr.test_cms;
    f.best_epochs = rr.best_epochs;
    f.epochs_run = rr.epochs_run;
    f.mean_uar = rr.summary.mean;
    f.std_uar = rr.summary.std;
    f.ensemble_uar = rr.ensemble_uar;
    f.ensemble_cm = rr.ensemble_cm;
    f.zero_support = zero_support_classes(rr.ensemble_cm);
    report.folds[fi] = std::move(f);
    if (progress) {
      progress(label + ": fold " + std::to_string(fi + 1) + "/" + std::to_string(in.folds.size()) + " (test " +
               fold.test_speaker + ") UAR " + format_uar(rr.summary.mean, rr.summary.std));
    }
  };

  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1 || in.folds.size() < 2) {
    for (std::size_t fi = 0; fi < in.folds.size(); ++fi) run_fold(fi);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t fi = next++; fi < in.folds.size(); fi = next++) {
          try {
            run_fold(fi);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  aggregate(report);
  return report;
}

inline EvalReport run_loso(const ExperimentConfig& cfg, const CorpusManifest& manifest, const std::string& label = "loso",
                           const ProgressFn& progress = nullptr) {
  return run_loso(cfg, prepare_loso(cfg, manifest), label, progress);
}

// ---------------------------------------------------------------------------
// Analysis harnesses
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string label;
  std::string fixed_fingerprint;  // fingerprint with the ablated field masked
  EvalReport report;
};

struct AblationReport {
  std::string axis;
  std::string title;
  std::string row_header;
  std::vector<AblationRow> rows;
};

namespace detail {

/// Fingerprint of the config text with every line starting with one of
/// `masked_keys` removed.
inline std::string masked_fingerprint(const ExperimentConfig& cfg, const std::vector<std::string>& masked_keys) {
  std::istringstream in(cfg.canonical_text());
  std::string line, kept;
  while (std::getline(in, line)) {
    bool skip = false;
    for (const auto& k : masked_keys) skip = skip || line.rfind(k + " =", 0) == 0;
    if (!skip) kept += line + "\n";
  }
  return fingerprint(kept);
}

inline AblationReport run_axis(const std::string& axis, const std::string& title, const std::string& row_header,
                               const ExperimentConfig& base, const CorpusManifest& manifest,
                               const std::vector<std::pair<std::string, ExperimentConfig>>& variants,
                               const std::vector<std::string>& masked, const ProgressFn& progress) {
  AblationReport rep{axis, title, row_header, {}};
  auto shared = prepare_loso(base, manifest);
  for (const auto& [label, cfg] : variants) {
    AblationRow row;
    row.label = label;
    row.fixed_fingerprint = masked_fingerprint(cfg, masked);
    row.report = run_loso(cfg, shared, axis + "=" + label, progress);
    rep.rows.push_back(std::move(row));
  }
  for (const auto& row : rep.rows) {
    if (row.fixed_fingerprint != rep.rows.front().fixed_fingerprint) {
      throw Error("ablation '" + axis + "': row '" + row.label + "' changed a field other than the ablated one");
    }
  }
  return rep;
}

}  // namespace detail

inline AblationReport ablate_parallel_layers(const ExperimentConfig& base, const CorpusManifest& manifest,
                                             const ProgressFn& progress = nullptr) {
  std::vector<std::pair<std::string, ExperimentConfig>> v;
  for (int n = 1; n <= 4; ++n) {
    ExperimentConfig c = base;
    c.model.branch_widths_ms = parallel_branch_sets(n);
    v.emplace_back(std::to_string(n), c);
  }
  return detail::run_axis("layers", "Effect of the number of parallel convolutional layers", "Layers", base, manifest, v,
                          {"model.branch_widths_ms"}, progress);
}

inline AblationReport ablate_pooling(const ExperimentConfig& base, const CorpusManifest& manifest,
                                     const ProgressFn& progress = nullptr) {
  std::vector<std::pair<std::string, ExperimentConfig>> v;
  for (PoolMode m : {PoolMode::Max, PoolMode::L2, PoolMode::Average}) {
    ExperimentConfig c = base;
    c.model.pool_mode = m;
    v.emplace_back(m == PoolMode::L2 ? "l2" : m == PoolMode::Max ? "max" : "Average", c);
  }
  return detail::run_axis("pooling", "UAR (%) with different pooling strategies", "Pooling", base, manifest, v,
                          {"model.pool_mode"}, progress);
}

inline AblationReport ablate_block(const ExperimentConfig& base, const CorpusManifest& manifest,
                                   const ProgressFn& progress = nullptr) {
  std::vector<std::pair<std::string, ExperimentConfig>> v;
  for (const auto& [kind, name] : block_kinds()) {
    ExperimentConfig c = base;
    c.model.block = build_ablation_block(kind);
    v.emplace_back(name, c);
  }
  return detail::run_axis("block", "UAR (%) by classification block composition", "Method", base, manifest, v,
                          {"model.block"}, progress);
}

inline const std::vector<double>& default_sweep_lengths() {
  static const std::vector<double> lengths = {1, 2, 3, 4, 5, 6};
  return lengths;
}

inline AblationReport sweep_input_length(const ExperimentConfig& base, const CorpusManifest& manifest,
                                         std::vector<double> lengths_s = default_sweep_lengths(),
                                         const ProgressFn& progress = nullptr) {
  std::sort(lengths_s.begin(), lengths_s.end());
  std::vector<std::pair<std::string, ExperimentConfig>> v;
  for (double len : lengths_s) {
    ExperimentConfig c = base;
    c.model.input_seconds = len;
    v.emplace_back(format_double(len), c);
  }
  return detail::run_axis("length", "System performance with different signal length", "Length (s)", base, manifest,
                          v, {"model.input_seconds"}, progress);
}

inline nlohmann::json to_json(const AblationReport& a) {
  nlohmann::json j;
  j["axis"] = a.axis;
  j["title"] = a.title;
  j["row_header"] = a.row_header;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : a.rows) {
    j["rows"].push_back({{"label", r.label},
                         {"fixed_fingerprint", r.fixed_fingerprint},
                         {"mean_uar", r.report.fold_mean},
                         {"std_uar", r.report.fold_std},
                         {"formatted", format_uar(r.report.fold_mean, r.report.fold_std)},
                         {"report", to_json(r.report)}});
  }
  return j;
}

inline AblationReport ablation_from_json(const nlohmann::json& j) {
  AblationReport a;
  a.axis = j.at("axis");
  a.title = j.at("title");
  a.row_header = j.at("row_header");
  for (const auto& r : j.at("rows")) {
    a.rows.push_back({r.at("label"), r.at("fixed_fingerprint"), report_from_json(r.at("report"))});
  }
  return a;
}

/// Aligned plain-text table, one row per variant, "mean±std" in percent.
inline std::string format_table(const AblationReport& a) {
  std::size_t w = a.row_header.size();
  for (const auto& r : a.rows) w = std::max(w, r.label.size());
  std::ostringstream os;
  os << a.title << '\n';
  auto pad = [w](const std::string& s) { return s + std::string(w + 2 - s.size(), ' '); };
  os << pad(a.row_header) << "UAR (%)\n";
  for (const auto& r : a.rows) os << pad(r.label) << format_uar(r.report.fold_mean, r.report.fold_std) << '\n';
  return os.str();
}

inline std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "Leave-one-speaker-out: " << r.label << " (config " << r.fingerprint << ")\n";
  os << "fold  test    val     UAR (%)      ensemble\n";
  char buf[160];
  for (std::size_t i = 0; i < r.folds.size(); ++i) {
    const auto& f = r.folds[i];
    std::snprintf(buf, sizeof buf, "%-5zu %-7s %-7s %-12s %.2f\n", i + 1, f.test_speaker.c_str(),
                  f.val_speaker.c_str(), format_uar(f.mean_uar, f.std_uar).c_str(), 100.0 * f.ensemble_uar);
    os << buf;
  }
  os << "across folds:   " << format_uar(r.fold_mean, r.fold_std) << '\n';
  os << "across repeats: " << format_uar(r.repeat_mean, r.repeat_std) << '\n';
  std::snprintf(buf, sizeof buf, "pooled UAR:     %.2f\n", 100.0 * r.pooled_uar);
  os << buf;
  if (!r.zero_support.empty()) os << "classes without support were excluded from UAR\n";
  return os.str();
}

/// Two-column-plus-spread series for plotting: length, mean UAR, std.
inline std::string format_series(const AblationReport& a) {
  std::ostringstream os;
  os << "length_s\tmean_uar\tstd_uar\n";
  for (const auto& r : a.rows) {
    os << r.label << '\t' << format_double(r.report.fold_mean) << '\t' << format_double(r.report.fold_std) << '\n';
  }
  return os.str();
}

}  // namespace rawser
