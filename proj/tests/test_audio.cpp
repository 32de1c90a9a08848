#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "rawser/audio.hpp"
#include "test_util.hpp"

using namespace rawser;
using rawser::testing::ScratchDir;

namespace {

void write_raw_pcm16(const std::filesystem::path& p, const std::vector<std::int16_t>& s, int channels = 1) {
  std::vector<unsigned char> b;
  auto put = [&](const char* tag) { b.insert(b.end(), tag, tag + 4); };
  const auto data_bytes = static_cast<std::uint32_t>(s.size() * 2);
  put("RIFF");
  detail::put32(b, 36 + data_bytes);
  put("WAVE");
  put("fmt ");
  detail::put32(b, 16);
  detail::put16(b, 1);
  detail::put16(b, static_cast<std::uint16_t>(channels));
  detail::put32(b, 16000);
  detail::put32(b, 16000 * 2 * channels);
  detail::put16(b, static_cast<std::uint16_t>(2 * channels));
  detail::put16(b, 16);
  put("data");
  detail::put32(b, data_bytes);
  for (auto v : s) detail::put16(b, static_cast<std::uint16_t>(v));
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::int16_t> read_raw_pcm16(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::int16_t> out;
  for (std::size_t i = 44; i + 1 < b.size(); i += 2) out.push_back(static_cast<std::int16_t>(b[i] | (b[i + 1] << 8)));
  return out;
}

Waveform sine(double seconds, double hz, double amp = 1.0, int rate = 16000) {
  Waveform w;
  w.sample_rate = rate;
  const auto n = static_cast<std::size_t>(std::llround(seconds * rate));
  for (std::size_t i = 0; i < n; ++i) w.samples.push_back(amp * std::sin(2.0 * std::numbers::pi * hz * i / rate));
  return w;
}

}  // namespace

TEST(Wav, ZeroSample) {
  ScratchDir dir("wav0");
  write_raw_pcm16(dir / "z.wav", {0});
  const Waveform w = read_wav(dir / "z.wav");
  EXPECT_EQ(w.samples, std::vector<double>{0.0});
  EXPECT_EQ(w.sample_rate, 16000);
  write_wav(w, dir / "z2.wav");
  EXPECT_EQ(read_raw_pcm16(dir / "z2.wav"), std::vector<std::int16_t>{0});
}

TEST(Wav, MostNegativeIsMinusOne) {
  ScratchDir dir("wavneg");
  write_raw_pcm16(dir / "n.wav", {-32768, 32767});
  const Waveform w = read_wav(dir / "n.wav");
  EXPECT_EQ(w.samples[0], -1.0);
  EXPECT_EQ(w.samples[1], 32767.0 / 32768.0);
}

TEST(Wav, FullScaleClampsTo32767) {
  ScratchDir dir("wavclamp");
  write_wav(Waveform{{1.0, -1.0}, 16000}, dir / "c.wav");
  EXPECT_EQ(read_raw_pcm16(dir / "c.wav"), (std::vector<std::int16_t>{32767, -32768}));
  EXPECT_THROW(write_wav(Waveform{{1.5}, 16000}, dir / "bad.wav"), AudioError);
}

TEST(Wav, SineLength) {
  ScratchDir dir("wavsine");
  write_wav(sine(1.0, 440.0, 0.5), dir / "s.wav");
  EXPECT_EQ(read_wav(dir / "s.wav").samples.size(), 16000u);
}

TEST(Wav, RoundTripRandomFiles) {
  ScratchDir dir("wavrt");
  Rng rng(12);
  std::uniform_int_distribution<int> sample(-32768, 32767);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  for (int f = 0; f < 1000; ++f) {
    std::vector<std::int16_t> s(len(rng));
    for (auto& v : s) v = static_cast<std::int16_t>(sample(rng));
    write_raw_pcm16(dir / "in.wav", s);
    const Waveform w = read_wav(dir / "in.wav");
    for (std::size_t i = 0; i < s.size(); ++i) ASSERT_LE(std::abs(w.samples[i] - s[i] / 32768.0), 1.0 / 32768.0);
    write_wav(w, dir / "out.wav");
    ASSERT_EQ(read_raw_pcm16(dir / "out.wav"), s) << "file " << f;
  }
}

TEST(Wav, StereoIsAveraged) {
  ScratchDir dir("wavst");
  write_raw_pcm16(dir / "st.wav", {16384, 0, -16384, -16384}, 2);
  const Waveform w = read_wav(dir / "st.wav");
  EXPECT_EQ(w.samples, (std::vector<double>{0.25, -0.5}));
}

TEST(Wav, DistinctErrors) {
  ScratchDir dir("waverr");
  EXPECT_THROW(read_wav(dir / "missing.wav"), WavMissingFile);
  std::ofstream(dir / "junk.wav") << "not a wave file at all";
  EXPECT_THROW(read_wav(dir / "junk.wav"), WavMalformed);
  write_raw_pcm16(dir / "f.wav", {1, 2, 3});
  {
    std::fstream f(dir / "f.wav", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    const char ieee_float[2] = {3, 0};
    f.write(ieee_float, 2);
  }
  EXPECT_THROW(read_wav(dir / "f.wav"), WavUnsupported);
}

TEST(Trim, SilenceUnchanged) {
  Waveform w{std::vector<double>(8000, 0.0), 16000};
  EXPECT_EQ(trim_nonspeech(w).samples, w.samples);
}

TEST(Trim, NoQuietEdgesIsIdentity) {
  const Waveform w = sine(0.5, 300.0, 0.8);
  EXPECT_EQ(trim_nonspeech(w).samples, w.samples);
}

TEST(Trim, RemovesEdgeSilence) {
  Waveform w{std::vector<double>(8000, 0.0), 16000};
  const Waveform tone = sine(1.0, 440.0, 1.0);
  w.samples.insert(w.samples.end(), tone.samples.begin(), tone.samples.end());
  w.samples.insert(w.samples.end(), 8000, 0.0);
  const Waveform t = trim_nonspeech(w, -40.0, 25.0);
  const double frame = 0.025 * 16000;
  EXPECT_LE(std::abs(static_cast<double>(t.samples.size()) - 16000.0), frame);
  // Output is a contiguous slice of the input.
  auto it = std::search(w.samples.begin(), w.samples.end(), t.samples.begin(), t.samples.end());
  EXPECT_NE(it, w.samples.end());
}

TEST(Speed, IdentityAndLengths) {
  const Waveform w = sine(1.0, 200.0, 0.5);
  EXPECT_EQ(speed_perturb(w, 1.0).samples, w.samples);
  EXPECT_EQ(speed_perturb(w, 0.9).samples.size(), 17778u);
  EXPECT_EQ(speed_perturb(w, 1.1).samples.size(), 14545u);
  EXPECT_EQ(speed_perturb(w, 1.1).sample_rate, 16000);
  EXPECT_THROW(speed_perturb(w, 0.0), AudioError);
}

TEST(Speed, LengthWithinHalfSample) {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 50000);
  std::uniform_real_distribution<double> fac(0.5, 2.0);
  for (int i = 0; i < 200; ++i) {
    Waveform w{std::vector<double>(len(rng), 0.1), 16000};
    const double f = fac(rng);
    const double expect = static_cast<double>(w.samples.size()) / f;
    EXPECT_LE(std::abs(static_cast<double>(speed_perturb(w, f).samples.size()) - expect), 0.5);
  }
}

TEST(Speed, LinearInterpolation) {
  Waveform w{{0.0, 1.0, 2.0, 3.0, 4.0}, 16000};
  const Waveform s = speed_perturb(w, 0.5);
  ASSERT_EQ(s.samples.size(), 10u);
  EXPECT_DOUBLE_EQ(s.samples[1], 0.5);
  EXPECT_DOUBLE_EQ(s.samples[3], 1.5);
}

TEST(Window, FixedLengths) {
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> len(0, 200000);
  for (int i = 0; i < 50; ++i) {
    Waveform w{std::vector<double>(len(rng), 0.2), 16000};
    EXPECT_EQ(fixed_window(w, 6.0).samples.size(), 96000u);
    EXPECT_EQ(fixed_window(w, 6.0, WindowMode::PadZero).samples.size(), 96000u);
  }
}

TEST(Window, ExactLengthIsIdentity) {
  const Waveform w = sine(2.0, 100.0, 0.3);
  EXPECT_EQ(fixed_window(w, 2.0).samples, w.samples);
}

TEST(Window, CenterCrop) {
  Waveform w;
  for (int i = 0; i < 128000; ++i) w.samples.push_back(i / 128000.0);
  const Waveform c = fixed_window(w, 6.0, WindowMode::CropCenter);
  ASSERT_EQ(c.samples.size(), 96000u);
  EXPECT_EQ(c.samples.front(), w.samples[16000]);
  EXPECT_EQ(c.samples.back(), w.samples[111999]);
}

TEST(Window, PadsShortInputWithZeros) {
  Waveform w{{0.5, 0.5}, 1000};
  const Waveform p = fixed_window(w, 0.004);
  EXPECT_EQ(p.samples, (std::vector<double>{0.5, 0.5, 0.0, 0.0}));
}
