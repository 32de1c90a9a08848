// Run configuration: one key = value file plus command-line overrides.
//
//   [model]  sample_rate, input_seconds, branch_widths_ms, branch_stride_ms,
//            filters_per_branch, pool_mode, pooled_frames, block, n_classes,
//            dropout
//   [train]  batch_size, max_epochs, learning_rate, rho, epsilon,
//            halve_patience, stop_patience, clip_norm
//   [data]   manifest, trim, trim_threshold_db, trim_frame_ms, window_mode,
//            augment_factors
//   [synth]  sessions, utterances_per_speaker, duration_s, sample_rate,
//            noise_level, edge_silence_s
//   [run]    seed, repeats, same_seed, jobs, out_dir, desk_scale,
//            sweep_lengths
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rawser/evaluation.hpp"

namespace rawser {

struct RunConfig {
  ExperimentConfig experiment;
  SynthSpec synth;
  std::string manifest = "corpus/manifest.csv";
  std::string out_dir = "out";
  bool desk_scale = false;
  std::vector<double> sweep_lengths = default_sweep_lengths();

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.experiment.canonical_text() == b.experiment.canonical_text() && a.experiment.jobs == b.experiment.jobs &&
           a.synth.sessions == b.synth.sessions && a.synth.utterances_per_speaker == b.synth.utterances_per_speaker &&
           a.synth.duration_s == b.synth.duration_s && a.synth.sample_rate == b.synth.sample_rate &&
           a.synth.noise_level == b.synth.noise_level && a.synth.edge_silence_s == b.synth.edge_silence_s &&
           a.manifest == b.manifest && a.out_dir == b.out_dir && a.desk_scale == b.desk_scale &&
           a.sweep_lengths == b.sweep_lengths;
  }

  KeyValues entries() const {
    KeyValues kv = experiment.model.to_entries("model.");
    const auto& t = experiment.train;
    const auto& p = experiment.preprocess;
    kv.insert(kv.end(), {{"train.batch_size", std::to_string(t.batch_size)},
                         {"train.max_epochs", std::to_string(t.max_epochs)},
                         {"train.learning_rate", format_double(t.learning_rate)},
                         {"train.rho", format_double(t.rho)},
                         {"train.epsilon", format_double(t.epsilon)},
                         {"train.halve_patience", std::to_string(t.halve_patience)},
                         {"train.stop_patience", std::to_string(t.stop_patience)},
                         {"train.clip_norm", format_double(t.clip_norm)},
                         {"data.manifest", manifest},
                         {"data.trim", p.trim ? "true" : "false"},
                         {"data.trim_threshold_db", format_double(p.trim_threshold_db)},
                         {"data.trim_frame_ms", format_double(p.trim_frame_ms)},
                         {"data.window_mode", to_string(p.window_mode)},
                         {"data.augment_factors", join_doubles(experiment.augment_factors)},
                         {"synth.sessions", std::to_string(synth.sessions)},
                         {"synth.utterances_per_speaker", std::to_string(synth.utterances_per_speaker)},
                         {"synth.duration_s", format_double(synth.duration_s)},
                         {"synth.sample_rate", std::to_string(synth.sample_rate)},
                         {"synth.noise_level", format_double(synth.noise_level)},
                         {"synth.edge_silence_s", format_double(synth.edge_silence_s)},
                         {"run.seed", std::to_string(experiment.seed)},
                         {"run.repeats", std::to_string(experiment.repeats)},
                         {"run.same_seed", experiment.same_seed ? "true" : "false"},
                         {"run.jobs", std::to_string(experiment.jobs)},
                         {"run.out_dir", out_dir},
                         {"run.desk_scale", desk_scale ? "true" : "false"},
                         {"run.sweep_lengths", join_doubles(sweep_lengths)}});
    return kv;
  }

  /// Sectioned text that parse_run_config reads back to an equal RunConfig.
  std::string to_text() const {
    std::string out, section;
    for (const auto& [k, v] : entries()) {
      const auto dot = k.find('.');
      const std::string s = k.substr(0, dot);
      if (s != section) {
        out += (section.empty() ? "[" : "\n[") + s + "]\n";
        section = s;
      }
      out += k.substr(dot + 1) + " = " + v + "\n";
    }
    return out;
  }

  /// Applies one fully qualified key ("section.name").
  void apply(const std::string& key, const std::string& v) {
    auto& t = experiment.train;
    auto& p = experiment.preprocess;
    auto positive = [&](std::int64_t x) {
      if (x < 1) throw ConfigError("'" + key + "' must be >= 1");
      return x;
    };
    if (key.rfind("model.", 0) == 0) {
      if (!experiment.model.apply(key.substr(6), v)) throw ConfigError("unknown key '" + key + "'");
    } else if (key == "train.batch_size") t.batch_size = static_cast<std::size_t>(positive(parse_int(key, v)));
    else if (key == "train.max_epochs") t.max_epochs = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "train.learning_rate") t.learning_rate = parse_double(key, v);
    else if (key == "train.rho") t.rho = parse_double(key, v);
    else if (key == "train.epsilon") t.epsilon = parse_double(key, v);
    else if (key == "train.halve_patience") t.halve_patience = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "train.stop_patience") t.stop_patience = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "train.clip_norm") t.clip_norm = parse_double(key, v);
    else if (key == "data.manifest") manifest = v;
    else if (key == "data.trim") p.trim = parse_bool(key, v);
    else if (key == "data.trim_threshold_db") p.trim_threshold_db = parse_double(key, v);
    else if (key == "data.trim_frame_ms") p.trim_frame_ms = parse_double(key, v);
    else if (key == "data.window_mode") {
      try {
        p.window_mode = parse_window_mode(v);
      } catch (const std::exception& e) {
        throw ConfigError("'" + key + "': " + e.what());
      }
    } else if (key == "data.augment_factors") experiment.augment_factors = parse_double_list(key, v);
    else if (key == "synth.sessions") synth.sessions = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "synth.utterances_per_speaker") synth.utterances_per_speaker = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "synth.duration_s") synth.duration_s = parse_double(key, v);
    else if (key == "synth.sample_rate") synth.sample_rate = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "synth.noise_level") synth.noise_level = parse_double(key, v);
    else if (key == "synth.edge_silence_s") synth.edge_silence_s = parse_double(key, v);
    else if (key == "run.seed") experiment.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "run.repeats") experiment.repeats = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "run.same_seed") experiment.same_seed = parse_bool(key, v);
    else if (key == "run.jobs") experiment.jobs = static_cast<int>(positive(parse_int(key, v)));
    else if (key == "run.out_dir") out_dir = v;
    else if (key == "run.desk_scale") {
      if (parse_bool(key, v)) apply_desk_scale();
    } else if (key == "run.sweep_lengths") sweep_lengths = parse_double_list(key, v);
    else throw ConfigError("unknown key '" + key + "'");
  }

  /// Switches every size default to the desk-scale values at once.
  void apply_desk_scale() {
    desk_scale = true;
    const ModelConfig d = desk_scale_model();
    auto& m = experiment.model;
    m.filters_per_branch = d.filters_per_branch;
    m.pooled_frames = d.pooled_frames;
    m.input_seconds = d.input_seconds;
    experiment.repeats = 3;
    experiment.train.max_epochs = 40;
    sweep_lengths = {0.5, 1.0, 1.5, 2.0, 2.5, 3.0};
  }

  void validate() const {
    Model::validate(experiment.model);
    if (experiment.model.sample_rate != synth.sample_rate) {
      throw ConfigError("model.sample_rate (" + std::to_string(experiment.model.sample_rate) +
                        ") differs from synth.sample_rate (" + std::to_string(synth.sample_rate) + ")");
    }
    for (double f : experiment.augment_factors)
      if (!(f > 0.0)) throw ConfigError("data.augment_factors must be positive");
    for (double s : sweep_lengths)
      if (!(s > 0.0)) throw ConfigError("run.sweep_lengths must be positive");
    if (!(experiment.train.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  }
};

/// Parses a config; desk-scale defaults (from `desk_scale` or a
/// "run.desk_scale = true" line) are applied before the other keys so
/// explicit values always win.
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config",
                                  bool desk_scale = false) {
  RunConfig c;
  if (desk_scale) c.apply_desk_scale();
  const KeyValues kv = parse_key_values(text, source);
  for (const auto& [k, v] : kv)
    if (k == "run.desk_scale") c.apply(k, v);
  for (const auto& [k, v] : kv)
    if (k != "run.desk_scale") c.apply(k, v);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, bool desk_scale = false) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string(), desk_scale);
}

}  // namespace rawser
