// Mono waveforms: PCM WAV decode/encode, edge trimming, speed perturbation
// and fixed-length windowing.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rawser/tensor.hpp"

namespace rawser {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

class AudioError : public Error {
 public:
  using Error::Error;
};

class WavMissingFile : public AudioError {
 public:
  using AudioError::AudioError;
};

class WavMalformed : public AudioError {
 public:
  using AudioError::AudioError;
};

class WavUnsupported : public AudioError {
 public:
  using AudioError::AudioError;
};

/// Milliseconds to samples: round(ms * rate / 1000).
inline std::size_t ms_to_samples(double ms, int sample_rate) {
  return static_cast<std::size_t>(std::llround(ms * sample_rate / 1000.0));
}

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

/// Decodes a RIFF/WAVE integer PCM file (8, 16, 24 or 32 bit). Samples are
/// divided by the type's maximum magnitude (2^(bits-1)); channels are
/// averaged to mono.
inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavMissingFile("read_wav: cannot open '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw WavMalformed("read_wav: missing RIFF/WAVE header" + where);
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= buf.size()) {
    const unsigned char* ck = buf.data() + pos;
    const std::uint32_t len = detail::le32(ck + 4);
    const std::size_t body = pos + 8;
    if (body + len > buf.size()) {
      // Tolerate a truncated trailing data chunk; anything else is malformed.
      if (std::memcmp(ck, "data", 4) != 0) throw WavMalformed("read_wav: truncated chunk" + where);
    }
    const std::size_t avail = std::min<std::size_t>(len, buf.size() - body);
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      if (avail < 16) throw WavMalformed("read_wav: fmt chunk too short" + where);
      format = detail::le16(buf.data() + body);
      channels = detail::le16(buf.data() + body + 2);
      rate = detail::le32(buf.data() + body + 4);
      bits = detail::le16(buf.data() + body + 14);
      if (format == 0xFFFE && avail >= 26) format = detail::le16(buf.data() + body + 24);  // extensible
      have_fmt = true;
    } else if (std::memcmp(ck, "data", 4) == 0) {
      data = buf.data() + body;
      data_len = avail;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) throw WavMalformed("read_wav: no fmt chunk" + where);
  if (!data) throw WavMalformed("read_wav: no data chunk" + where);
  if (format != 1) throw WavUnsupported("read_wav: unsupported encoding (format tag " + std::to_string(format) +
                                        ", only integer PCM is supported)" + where);
  if (channels == 0 || rate == 0) throw WavMalformed("read_wav: zero channels or sample rate" + where);
  if (bits != 8 && bits != 16 && bits != 24 && bits != 32) {
    throw WavUnsupported("read_wav: unsupported bit depth " + std::to_string(bits) + where);
  }
  const std::size_t bytes = bits / 8;
  const std::size_t frame = bytes * channels;
  const std::size_t frames = data_len / frame;
  if (frames == 0) throw WavMalformed("read_wav: empty data chunk" + where);
  const double scale = std::ldexp(1.0, bits - 1);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const unsigned char* p = data + f * frame + ch * bytes;
      std::int32_t v = 0;
      switch (bits) {
        case 8: v = static_cast<std::int32_t>(p[0]) - 128; break;
        case 16: v = static_cast<std::int16_t>(detail::le16(p)); break;
        case 24: {
          std::uint32_t u = p[0] | (p[1] << 8) | (p[2] << 16);
          if (u & 0x800000u) u |= 0xFF000000u;
          v = static_cast<std::int32_t>(u);
          break;
        }
        default: v = static_cast<std::int32_t>(detail::le32(p)); break;
      }
      acc += static_cast<double>(v) / scale;
    }
    w.samples[f] = acc / channels;
  }
  return w;
}

/// Quantizes to 16-bit: q = clamp(round(a * 32768), -32768, 32767).
inline std::int16_t quantize16(double a) {
  const double q = std::clamp(std::round(a * 32768.0), -32768.0, 32767.0);
  return static_cast<std::int16_t>(q);
}

/// Writes 16-bit PCM mono.
inline void write_wav(const Waveform& wav, const std::filesystem::path& path) {
  if (wav.sample_rate <= 0) throw AudioError("write_wav: sample rate must be positive");
  for (std::size_t i = 0; i < wav.samples.size(); ++i) {
    const double a = wav.samples[i];
    if (!std::isfinite(a) || a < -1.0 || a > 1.0) {
      throw AudioError("write_wav: amplitude " + std::to_string(a) + " at sample " + std::to_string(i) +
                       " outside [-1, 1]");
    }
  }
  const auto n = static_cast<std::uint32_t>(wav.samples.size());
  std::vector<unsigned char> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  detail::put32(b, 36 + 2 * n);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put32(b, 16);
  detail::put16(b, 1);
  detail::put16(b, 1);
  detail::put32(b, static_cast<std::uint32_t>(wav.sample_rate));
  detail::put32(b, static_cast<std::uint32_t>(wav.sample_rate) * 2);
  detail::put16(b, 2);
  detail::put16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  detail::put32(b, 2 * n);
  for (double a : wav.samples) detail::put16(b, static_cast<std::uint16_t>(quantize16(a)));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AudioError("write_wav: cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw AudioError("write_wav: write failed for '" + path.string() + "'");
}

/// Removes leading and trailing frames whose RMS lies more than |threshold_db|
/// below the loudest frame. Interior frames are kept; an all-quiet input is
/// returned unchanged.
inline Waveform trim_nonspeech(const Waveform& wav, double threshold_db = -40.0, double frame_ms = 25.0) {
  if (!(frame_ms > 0.0)) throw AudioError("trim_nonspeech: frame_ms must be positive");
  if (!(threshold_db < 0.0)) throw AudioError("trim_nonspeech: threshold_db must be negative");
  const std::size_t frame = std::max<std::size_t>(1, ms_to_samples(frame_ms, wav.sample_rate));
  const std::size_t n = wav.samples.size();
  if (n == 0) return wav;
  const std::size_t frames = (n + frame - 1) / frame;
  std::vector<double> rms(frames, 0.0);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t lo = f * frame, hi = std::min(n, lo + frame);
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += wav.samples[i] * wav.samples[i];
    rms[f] = std::sqrt(acc / static_cast<double>(hi - lo));
  }
  const double peak = *std::max_element(rms.begin(), rms.end());
  if (peak <= 0.0) return wav;
  const double gate = peak * std::pow(10.0, threshold_db / 20.0);
  std::size_t first = 0, last = frames;
  while (first < frames && rms[first] < gate) ++first;
  while (last > first && rms[last - 1] < gate) --last;
  if (first >= last) return wav;
  Waveform out;
  out.sample_rate = wav.sample_rate;
  out.samples.assign(wav.samples.begin() + static_cast<std::ptrdiff_t>(first * frame),
                     wav.samples.begin() + static_cast<std::ptrdiff_t>(std::min(n, last * frame)));
  return out;
}

/// Tempo-and-pitch speed change: output length round(N / factor), output
/// sample k linearly interpolates the input at position k * factor.
inline Waveform speed_perturb(const Waveform& wav, double factor) {
  if (!(factor > 0.0)) throw AudioError("speed_perturb: factor must be positive, got " + std::to_string(factor));
  const std::size_t n = wav.samples.size();
  if (factor == 1.0) return wav;
  const auto m = static_cast<std::size_t>(std::llround(static_cast<double>(n) / factor));
  Waveform out;
  out.sample_rate = wav.sample_rate;
  out.samples.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double pos = static_cast<double>(k) * factor;
    const auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= n) {
      out.samples[k] = n ? wav.samples[n - 1] : 0.0;
      continue;
    }
    const double frac = pos - static_cast<double>(i);
    out.samples[k] = wav.samples[i] + frac * (wav.samples[i + 1] - wav.samples[i]);
  }
  return out;
}

enum class WindowMode { PadZero, CropCenter };

inline std::string to_string(WindowMode m) { return m == WindowMode::PadZero ? "pad-zero" : "crop-center"; }

inline WindowMode parse_window_mode(const std::string& s) {
  if (s == "pad-zero") return WindowMode::PadZero;
  if (s == "crop-center") return WindowMode::CropCenter;
  throw Error("unknown window mode '" + s + "' (expected pad-zero or crop-center)");
}

/// Exactly round(seconds * rate) samples. Short inputs are zero-padded at the
/// end. Long inputs keep their head (pad-zero) or their centre (crop-center).
inline Waveform fixed_window(const Waveform& wav, double seconds, WindowMode mode = WindowMode::CropCenter) {
  if (!(seconds > 0.0)) throw AudioError("fixed_window: seconds must be positive");
  const auto target = static_cast<std::size_t>(std::llround(seconds * wav.sample_rate));
  Waveform out;
  out.sample_rate = wav.sample_rate;
  const std::size_t n = wav.samples.size();
  if (n <= target) {
    out.samples = wav.samples;
    out.samples.resize(target, 0.0);
    return out;
  }
  const std::size_t start = mode == WindowMode::CropCenter ? (n - target) / 2 : 0;
  out.samples.assign(wav.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     wav.samples.begin() + static_cast<std::ptrdiff_t>(start + target));
  return out;
}

}  // namespace rawser
