// Corpus manifests, speed-perturbation bookkeeping, leave-one-speaker-out
// folds and a synthetic corpus generator.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rawser/audio.hpp"

namespace rawser {

inline constexpr std::size_t kNumEmotions = 4;
inline constexpr std::array<const char*, kNumEmotions> kEmotionNames = {"angry", "happy", "neutral", "sad"};

enum class Emotion { Angry = 0, Happy = 1, Neutral = 2, Sad = 3 };

class CorpusError : public Error {
 public:
  using Error::Error;
};

inline std::string to_string(Emotion e) { return kEmotionNames[static_cast<std::size_t>(e)]; }

inline std::optional<Emotion> parse_emotion(const std::string& s) {
  for (std::size_t i = 0; i < kNumEmotions; ++i)
    if (s == kEmotionNames[i]) return static_cast<Emotion>(i);
  return std::nullopt;
}

/// Formats a speed factor so integers keep one decimal ("1.0", "0.9").
inline std::string format_factor(double f) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", f);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

/// Either the original recording or a speed-perturbed copy of it.
struct Augmentation {
  double factor = 1.0;
  bool original = true;

  static Augmentation speed(double f) { return {f, false}; }

  std::string str() const { return original ? "original" : "speed-" + format_factor(factor); }

  static Augmentation parse(const std::string& s) {
    if (s == "original") return {};
    if (s.rfind("speed-", 0) == 0) {
      std::size_t used = 0;
      double f = 0.0;
      try {
        f = std::stod(s.substr(6), &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == s.size() - 6 && f > 0.0) return speed(f);
    }
    throw CorpusError("bad augmentation tag '" + s + "' (expected original or speed-<factor>)");
  }

  friend bool operator==(const Augmentation& a, const Augmentation& b) {
    return a.original == b.original && (a.original || a.factor == b.factor);
  }
};

struct UtteranceRecord {
  std::string path;  // relative to the manifest's directory
  std::string speaker;
  std::string session;
  Emotion label = Emotion::Neutral;
  Augmentation augmentation;

  int label_index() const { return static_cast<int>(label); }
};

struct CorpusManifest {
  std::string name;
  std::vector<UtteranceRecord> records;
  std::filesystem::path base_dir;  // where relative record paths resolve

  std::size_t size() const { return records.size(); }
  bool has_augmented() const {
    for (const auto& r : records)
      if (!r.augmentation.original) return true;
    return false;
  }
  std::filesystem::path resolve(const UtteranceRecord& r) const { return base_dir / r.path; }
};

inline const char* kManifestHeader = "path,speaker,session,label,augmentation";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline CorpusManifest parse_manifest(std::istream& in, const std::string& name = "manifest") {
  CorpusManifest m;
  m.name = name;
  std::string line;
  if (!std::getline(in, line)) throw CorpusError(name + ": empty file (missing header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw CorpusError(name + ": row 1: expected header '" + std::string(kManifestHeader) + "', got '" + line + "'");
  }
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cols = detail::split_csv_line(line);
    const std::string at = name + ": row " + std::to_string(row) + ": ";
    if (cols.size() != 5) {
      throw CorpusError(at + "malformed row, expected 5 columns but found " + std::to_string(cols.size()));
    }
    for (const auto& c : cols)
      if (c.empty()) throw CorpusError(at + "malformed row, empty field");
    UtteranceRecord r;
    r.path = cols[0];
    r.speaker = cols[1];
    r.session = cols[2];
    const auto label = parse_emotion(cols[3]);
    if (!label) throw CorpusError(at + "unknown label '" + cols[3] + "' (allowed: angry, happy, neutral, sad)");
    r.label = *label;
    try {
      r.augmentation = Augmentation::parse(cols[4]);
    } catch (const CorpusError& e) {
      throw CorpusError(at + e.what());
    }
    if (!seen.emplace(r.path, r.augmentation.str()).second) {
      throw CorpusError(at + "duplicate (path, augmentation) = (" + r.path + ", " + cols[4] + ")");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open manifest '" + path.string() + "'");
  CorpusManifest m = parse_manifest(in, path.filename().string());
  m.base_dir = path.parent_path();
  return m;
}

inline void write_manifest(const CorpusManifest& m, std::ostream& out) {
  out << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    for (const std::string* f : {&r.path, &r.speaker, &r.session})
      if (f->find_first_of(",\n") != std::string::npos) throw CorpusError("manifest field '" + *f + "' contains a comma or newline");
    out << r.path << ',' << r.speaker << ',' << r.session << ',' << to_string(r.label) << ','
        << r.augmentation.str() << '\n';
  }
}

inline void save_manifest(const CorpusManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CorpusError("cannot write manifest '" + path.string() + "'");
  write_manifest(m, out);
}

/// Originals followed by one speed-perturbed copy per (record, factor).
inline CorpusManifest augment_manifest(const CorpusManifest& m, const std::vector<double>& factors) {
  if (factors.empty()) throw CorpusError("augment_manifest: factor list is empty");
  for (double f : factors)
    if (!(f > 0.0)) throw CorpusError("augment_manifest: factors must be positive");
  if (m.has_augmented()) throw CorpusError("augment_manifest: manifest already contains augmented records");
  CorpusManifest out = m;
  for (const auto& r : m.records) {
    for (double f : factors) {
      UtteranceRecord copy = r;
      copy.augmentation = Augmentation::speed(f);
      out.records.push_back(std::move(copy));
    }
  }
  return out;
}

struct LosoFold {
  std::string test_speaker;
  std::string val_speaker;
  std::string session;
  std::vector<std::size_t> train;  // indices into the source manifest
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Sessions (in first-appearance order) with their speakers (same order).
inline std::vector<std::pair<std::string, std::vector<std::string>>> session_speakers(const CorpusManifest& m) {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  std::map<std::string, std::string> speaker_session;
  for (const auto& r : m.records) {
    auto [it, inserted] = speaker_session.emplace(r.speaker, r.session);
    if (!inserted && it->second != r.session) {
      throw CorpusError("speaker '" + r.speaker + "' appears in sessions '" + it->second + "' and '" + r.session + "'");
    }
    auto sit = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.session; });
    if (sit == out.end()) {
      out.push_back({r.session, {}});
      sit = std::prev(out.end());
    }
    if (std::find(sit->second.begin(), sit->second.end(), r.speaker) == sit->second.end()) {
      sit->second.push_back(r.speaker);
    }
  }
  return out;
}

/// One fold per speaker: the speaker is tested, its session partner
/// validates, every other speaker (augmented copies included) trains.
inline std::vector<LosoFold> loso_folds(const CorpusManifest& m) {
  const auto sessions = session_speakers(m);
  for (const auto& [session, speakers] : sessions) {
    if (speakers.size() != 2) {
      throw CorpusError("session '" + session + "' has " + std::to_string(speakers.size()) +
                        " speakers; leave-one-speaker-out folds require exactly 2");
    }
  }
  std::vector<LosoFold> folds;
  for (const auto& [session, speakers] : sessions) {
    for (std::size_t k = 0; k < 2; ++k) {
      LosoFold f;
      f.session = session;
      f.test_speaker = speakers[k];
      f.val_speaker = speakers[1 - k];
      for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (r.speaker == f.test_speaker) {
          if (r.augmentation.original) f.test.push_back(i);
        } else if (r.speaker == f.val_speaker) {
          if (r.augmentation.original) f.val.push_back(i);
        } else {
          f.train.push_back(i);
        }
      }
      if (f.train.empty()) {
        throw CorpusError("empty training partition for test speaker '" + f.test_speaker +
                          "' (the corpus needs at least two sessions)");
      }
      folds.push_back(std::move(f));
    }
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Per-class signal family: fundamental-frequency band centre and
/// amplitude-modulation rate.
struct ClassSignature {
  double f0_hz;
  double am_hz;
};

inline constexpr std::array<ClassSignature, kNumEmotions> kClassSignatures = {{
    {260.0, 7.0},  // angry
    {200.0, 4.5},  // happy
    {140.0, 2.5},  // neutral
    {100.0, 1.2},  // sad
}};

struct SynthSpec {
  int sessions = 5;
  int utterances_per_speaker = 12;
  double duration_s = 2.0;
  int sample_rate = 16000;
  double noise_level = 0.05;
  double edge_silence_s = 0.2;
};

/// Generates WAV files under out_dir/wav and returns the manifest (also
/// saved as out_dir/manifest.csv). Speakers are "S<ss>A"/"S<ss>B";
/// utterance u of a speaker carries class u mod 4.
inline CorpusManifest generate_synthetic(const SynthSpec& spec, std::uint64_t seed,
                                         const std::filesystem::path& out_dir) {
  if (spec.sessions < 1 || spec.utterances_per_speaker < 1 || !(spec.duration_s > 0.0) || spec.sample_rate <= 0) {
    throw CorpusError("generate_synthetic: sessions, utterances per speaker, duration and rate must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  if (ec) throw CorpusError("generate_synthetic: cannot create '" + (out_dir / "wav").string() + "': " + ec.message());

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr std::size_t kHarmonics = 6;
  const double two_pi = 2.0 * std::numbers::pi;

  CorpusManifest m;
  m.name = "synthetic";
  m.base_dir = out_dir;
  for (int s = 0; s < spec.sessions; ++s) {
    char session[16];
    std::snprintf(session, sizeof session, "S%02d", s + 1);
    for (char side : {'A', 'B'}) {
      const std::string speaker = std::string(session) + side;
      std::array<double, kHarmonics> weights{};
      for (auto& w : weights) w = 0.2 + 0.8 * unit(rng);
      const double pitch_offset = 1.0 + 0.1 * (unit(rng) - 0.5);
      for (int u = 0; u < spec.utterances_per_speaker; ++u) {
        const auto cls = static_cast<std::size_t>(u) % kNumEmotions;
        const auto& sig = kClassSignatures[cls];
        const double f0 = sig.f0_hz * pitch_offset * (1.0 + 0.08 * (unit(rng) - 0.5));
        const double am = sig.am_hz * (1.0 + 0.16 * (unit(rng) - 0.5));
        const double dur = spec.duration_s * (0.9 + 0.2 * unit(rng));
        const double lead = spec.edge_silence_s * (0.5 + unit(rng));
        const double tail = spec.edge_silence_s * (0.5 + unit(rng));
        const double am_phase = two_pi * unit(rng);
        std::array<double, kHarmonics> phases{};
        for (auto& p : phases) p = two_pi * unit(rng);

        const auto n_lead = static_cast<std::size_t>(lead * spec.sample_rate);
        const auto n_body = static_cast<std::size_t>(dur * spec.sample_rate);
        const auto n_tail = static_cast<std::size_t>(tail * spec.sample_rate);
        std::vector<double> body(n_body);
        double peak = 0.0;
        for (std::size_t i = 0; i < n_body; ++i) {
          const double t = static_cast<double>(i) / spec.sample_rate;
          double v = 0.0;
          for (std::size_t h = 0; h < kHarmonics; ++h) {
            v += weights[h] / static_cast<double>(h + 1) * std::sin(two_pi * f0 * static_cast<double>(h + 1) * t + phases[h]);
          }
          v *= 0.55 + 0.45 * std::sin(two_pi * am * t + am_phase);
          body[i] = v;
          peak = std::max(peak, std::abs(v));
        }
        Waveform w;
        w.sample_rate = spec.sample_rate;
        w.samples.reserve(n_lead + n_body + n_tail);
        constexpr double kFloor = 0.002;
        for (std::size_t i = 0; i < n_lead; ++i) w.samples.push_back(kFloor * gauss(rng));
        for (double v : body) w.samples.push_back(0.7 * v / peak + spec.noise_level * gauss(rng));
        for (std::size_t i = 0; i < n_tail; ++i) w.samples.push_back(kFloor * gauss(rng));
        for (double& v : w.samples) v = std::clamp(v, -1.0, 1.0);

        char file[64];
        std::snprintf(file, sizeof file, "wav/%s_%03d.wav", speaker.c_str(), u);
        write_wav(w, out_dir / file);
        m.records.push_back({file, speaker, session, static_cast<Emotion>(cls), {}});
      }
    }
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace rawser
