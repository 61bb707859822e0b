#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "oracles.hpp"
#include "percept/audio.hpp"
#include "synth.hpp"

using namespace percept;
namespace fs = std::filesystem;

namespace {

// Hand-built RIFF file with a caller-chosen fmt body and data payload.
Bytes wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint16_t bits,
                const std::vector<std::int16_t>& samples, bool with_fmt = true, std::uint32_t declared_data = 0) {
  ByteWriter w;
  w.raw("RIFF");
  w.u32(0);
  w.raw("WAVE");
  if (with_fmt) {
    w.raw("fmt ");
    w.u32(16);
    w.u16(format);
    w.u16(channels);
    w.u32(16000);
    w.u32(16000u * channels * bits / 8);
    w.u16(static_cast<std::uint16_t>(channels * bits / 8));
    w.u16(bits);
  }
  w.raw("data");
  w.u32(declared_data ? declared_data : static_cast<std::uint32_t>(samples.size() * 2));
  for (auto s : samples) w.u16(static_cast<std::uint16_t>(s));
  return w.take();
}

AudioBuffer sine(double hz, double amplitude = 0.5, double seconds = 1.0, std::uint32_t rate = 16000) {
  AudioBuffer b;
  b.sample_rate = rate;
  const auto n = static_cast<std::size_t>(seconds * rate);
  for (std::size_t i = 0; i < n; ++i)
    b.samples.push_back(amplitude * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / rate));
  return b;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("percept_audio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void expect_format_error(const Bytes& b, const std::string& needle) {
  try {
    parse_wav(b);
    FAIL() << "expected a format error mentioning " << needle;
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Wav, CanonicalSamples) {
  const auto b = wav_bytes(1, 1, 16, {0});
  EXPECT_EQ(b.size(), 46u);
  EXPECT_EQ(parse_wav(b).samples, std::vector<double>{0.0});
  const auto m = parse_wav(wav_bytes(1, 1, 16, {0x7FFF}));
  EXPECT_NEAR(m.samples[0], 0.999969, 1e-6);
  EXPECT_EQ(m.sample_rate, 16000u);
}

TEST(Wav, StereoAveragedToMono) {
  const auto b = parse_wav(wav_bytes(1, 2, 16, {16384, -16384, 8192, 8192}));
  EXPECT_EQ(b.samples, (std::vector<double>{0.0, 0.25}));
}

TEST(Wav, UnknownChunksSkipped) {
  ByteWriter w;
  w.raw("RIFF");
  w.u32(0);
  w.raw("WAVE");
  w.raw("LIST");
  w.u32(3);
  w.raw("abc");
  w.u8(0);  // pad byte
  const auto body = wav_bytes(1, 1, 16, {100});
  auto out = w.take();
  out.insert(out.end(), body.begin() + 12, body.end());
  EXPECT_NEAR(parse_wav(out).samples.at(0), 100.0 / 32768, 1e-15);
}

TEST(Wav, DistinctDiagnostics) {
  expect_format_error(wav_bytes(3, 1, 32, {0, 0}), "unsupported format code 3");
  expect_format_error(wav_bytes(1, 1, 16, {1, 2}, true, 400), "truncated data chunk");
  expect_format_error(wav_bytes(1, 1, 16, {1}, false), "missing fmt chunk");
  expect_format_error(Bytes{'R', 'I', 'F'}, "too short");
}

TEST(Wav, EncodeRoundTrip) {
  const std::vector<double> s{0.0, 0.5, -0.5, 0.25};
  const auto b = parse_wav(encode_wav_pcm16(s, 8000));
  EXPECT_EQ(b.samples, s);
  EXPECT_EQ(b.sample_rate, 8000u);
}

TEST(Framing, FrameCount) {
  const auto f = frame_signal(sine(100), MfccConfig{});
  EXPECT_EQ(f.shape(), (Shape{98, 400}));
  AudioBuffer exact{std::vector<double>(400, 0.1), 16000};
  EXPECT_EQ(frame_signal(exact, MfccConfig{}).dim(0), 1u);
  AudioBuffer shorty{std::vector<double>(100, 0.1), 16000};
  EXPECT_THROW(frame_signal(shorty, MfccConfig{}), Error);
}

TEST(Hamming, Values) {
  const std::vector<double> ones(9, 1.0);
  const auto w = hamming_window(ones);
  EXPECT_NEAR(w.front(), 0.08, 1e-15);
  EXPECT_NEAR(w.back(), 0.08, 1e-15);
  EXPECT_NEAR(w[4], 1.0, 1e-15);
  const std::vector<double> zeros(10, 0.0);
  EXPECT_EQ(hamming_window(zeros), zeros);
  EXPECT_THROW(hamming_window(std::vector<double>{1.0}), Error);
}

TEST(PowerSpectrum, Impulse) {
  std::vector<double> x(16, 0.0);
  x[0] = 1;
  for (double v : power_spectrum(x, 16)) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(PowerSpectrum, CosineBin) {
  std::vector<double> x(8);
  for (std::size_t n = 0; n < 8; ++n) x[n] = std::cos(2 * std::numbers::pi * 2.0 * double(n) / 8.0);
  const auto p = power_spectrum(x, 8);
  ASSERT_EQ(p.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(p[k], k == 2 ? 16.0 : 0.0, 1e-9);
}

TEST(PowerSpectrum, MatchesNaiveDft) {
  Prng prng(10);
  std::vector<double> x(256);
  for (double& v : x) v = prng.uniform(-1, 1);
  const auto fast = power_spectrum(x, 256);
  const auto slow = oracles::naive_power(x);
  for (std::size_t k = 0; k < fast.size(); ++k) EXPECT_NEAR(fast[k], slow[k], 1e-9);
}

TEST(PowerSpectrum, Parseval) {
  Prng prng(11);
  for (std::size_t n : {64u, 512u}) {
    std::vector<double> x(n);
    double energy = 0;
    for (double& v : x) {
      v = prng.uniform(-1, 1);
      energy += v * v;
    }
    const auto p = power_spectrum(x, n);
    // Full spectrum from the one-sided half: interior bins appear twice.
    double full = p.front() + p.back();
    for (std::size_t k = 1; k + 1 < p.size(); ++k) full += 2 * p[k];
    EXPECT_NEAR(full / static_cast<double>(n), energy, 1e-6 * energy);
  }
}

TEST(PowerSpectrum, RejectsNonPowerOfTwo) {
  EXPECT_THROW(power_spectrum(std::vector<double>(10, 0.0), 12), Error);
}

TEST(Mel, Scale) {
  EXPECT_EQ(hz_to_mel(0), 0.0);
  EXPECT_NEAR(hz_to_mel(700), 781.17, 0.01);
  for (double f : {100.0, 1000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(f)), f, 1e-9 * f);
  EXPECT_THROW(hz_to_mel(-1), Error);
  double prev = -1;
  for (double f = 0; f < 20000; f += 37.5) {
    const double m = hz_to_mel(f);
    EXPECT_GT(m, prev);
    prev = m;
  }
}

TEST(MelFilterbank, Properties) {
  const MfccConfig c;
  const auto fb = build_mel_filterbank(c, 16000);
  ASSERT_EQ(fb.shape(), (Shape{26, 257}));
  const auto bins = mel_filter_bins(resolve_frames(c, 16000), 16000);
  std::size_t prev_peak = 0;
  for (std::size_t m = 0; m < 26; ++m) {
    double mx = 0;
    std::size_t peak = 0;
    for (std::size_t k = 0; k < 257; ++k)
      if (fb.at(m, k) > mx) {
        mx = fb.at(m, k);
        peak = k;
      }
    EXPECT_EQ(mx, 1.0);
    EXPECT_GE(peak, prev_peak);
    prev_peak = peak;
  }
  for (std::size_t k = bins[1] + 1; k < bins[26]; ++k) {
    double s = 0;
    for (std::size_t m = 0; m < 26; ++m) s += fb.at(m, k);
    EXPECT_GT(s, 0.0) << "bin " << k;
  }
}

TEST(MelFilterbank, TooManyFilters) {
  MfccConfig c;
  c.n_mels = 200;
  c.n_coeffs = 13;
  EXPECT_THROW(build_mel_filterbank(c, 16000), Error);
}

TEST(Dct, ConstantVector) {
  const std::vector<double> v(26, 3.0);
  const auto c = dct2(v, 26);
  EXPECT_NEAR(c[0], 3.0 * std::sqrt(26.0), 1e-9);
  for (std::size_t k = 1; k < 26; ++k) EXPECT_NEAR(c[k], 0.0, 1e-9);
}

TEST(Dct, MatchesDirectFormulaAndInverts) {
  Prng prng(4);
  std::vector<double> v(26);
  for (double& x : v) x = prng.uniform(-5, 5);
  const auto c = dct2(v, 26);
  for (std::size_t k = 0; k < 26; ++k) EXPECT_NEAR(c[k], oracles::direct_dct2(v, k), 1e-9);
  const auto back = idct2(c);
  for (std::size_t n = 0; n < 26; ++n) EXPECT_NEAR(back[n], v[n], 1e-6);
  EXPECT_THROW(dct2(v, 27), Error);
}

TEST(Mfcc, ShapeAndDeterminism) {
  Prng prng(1);
  const auto bytes = encode_wav_pcm16(synth::tone(220, 16000, 1.0, 0.05, prng), 16000);
  const auto a = mfcc(parse_wav(bytes), MfccConfig{});
  const auto b = mfcc(parse_wav(bytes), MfccConfig{});
  EXPECT_EQ(a.shape(), (Shape{98, 13}));
  EXPECT_EQ(a, b);
}

TEST(Mfcc, SilenceGivesConstantRows) {
  AudioBuffer s{std::vector<double>(16000, 0.0), 16000};
  const auto m = mfcc(s, MfccConfig{});
  for (std::size_t t = 1; t < m.dim(0); ++t)
    for (std::size_t k = 0; k < 13; ++k) EXPECT_EQ(m.at(t, k), m.at(0, k));
}

TEST(Mfcc, DiscriminatesFrequencies) {
  const auto a = mfcc(sine(200), MfccConfig{}), b = mfcc(sine(2000), MfccConfig{});
  double d = 0;
  for (std::size_t k = 0; k < 13; ++k) {
    double ma = 0, mb = 0;
    for (std::size_t t = 0; t < a.dim(0); ++t) {
      ma += a.at(t, k);
      mb += b.at(t, k);
    }
    const double diff = (ma - mb) / static_cast<double>(a.dim(0));
    d += diff * diff;
  }
  EXPECT_GT(std::sqrt(d), 1.0);
}

TEST(Mfcc, AmplitudeScalingOnlyMovesC0) {
  Prng prng(2);
  AudioBuffer x{synth::tone(440, 16000, 1.0, 0.2, prng), 16000};
  AudioBuffer half = x;
  for (double& v : half.samples) v *= 0.5;
  const auto a = mfcc(x, MfccConfig{}), b = mfcc(half, MfccConfig{});
  for (std::size_t t = 0; t < a.dim(0); ++t) {
    EXPECT_LT(b.at(t, 0), a.at(t, 0));
    for (std::size_t k = 1; k < 13; ++k) EXPECT_NEAR(a.at(t, k), b.at(t, k), 1e-6);
  }
}

TEST(Scaler, HandStatistics) {
  const auto s = scaler_fit(Tensor64(Shape{2, 1}, {1.0, 3.0}));
  EXPECT_EQ(s.mean[0], 2.0);
  EXPECT_EQ(s.std[0], 1.0);
  EXPECT_EQ(scaler_transform(s, Tensor64(Shape{2, 1}, {1.0, 3.0})).vec(), (std::vector<double>{-1.0, 1.0}));
  EXPECT_THROW(scaler_transform(s, Tensor64(Shape{2, 2})), Error);
  EXPECT_THROW(scaler_fit(Tensor64(Shape{1, 3})), Error);
}

TEST(Scaler, StandardizesFitSetAndGuardsConstants) {
  Prng prng(9);
  auto rows = prng_uniform<double>(prng, Shape{500, 4}, -3, 7);
  for (std::size_t r = 0; r < 500; ++r) rows.at(r, 2) = 4.5;
  const auto s = scaler_fit(rows);
  const auto z = scaler_transform(s, rows);
  for (std::size_t d = 0; d < 4; ++d) {
    double m = 0, v = 0;
    for (std::size_t r = 0; r < 500; ++r) m += z.at(r, d);
    m /= 500;
    for (std::size_t r = 0; r < 500; ++r) v += (z.at(r, d) - m) * (z.at(r, d) - m);
    v /= 500;
    EXPECT_LT(std::abs(m), 1e-6);
    if (d == 2) {
      for (std::size_t r = 0; r < 500; ++r) EXPECT_EQ(z.at(r, d), 0.0);
    } else {
      EXPECT_NEAR(std::sqrt(v), 1.0, 1e-6);
    }
  }
}

TEST(Snippets, Concatenation) {
  std::vector<AudioBuffer> clips(120, sine(100));
  EXPECT_DOUBLE_EQ(concat_snippets(clips, 120).seconds(), 120.0);
  const std::vector<AudioBuffer> one{sine(100)};
  const auto cut = concat_snippets(one, 0.5);
  EXPECT_EQ(cut.samples.size(), 8000u);
  EXPECT_TRUE(std::equal(cut.samples.begin(), cut.samples.end(), one[0].samples.begin()));
  const std::vector<AudioBuffer> mixed{sine(100), sine(100, 0.5, 1.0, 8000)};
  EXPECT_THROW(concat_snippets(mixed, 2), Error);
}

TEST(Plots, FilesAndRoundTrip) {
  const auto dir = scratch("plots");
  const auto buf = sine(300);
  render_audio_plots(buf, MfccConfig{}, dir);
  for (const char* f : {"waveform.csv", "spectrogram.csv", "spectrogram.pgm", "mfcc.csv", "mfcc.pgm"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto img = load_pgm(read_file_bytes(dir / "spectrogram.pgm"));
  EXPECT_EQ(img.width, 98u);
  const auto m = matrix_from_csv(read_file_text(dir / "mfcc.csv"));
  const auto ref = mfcc(buf, MfccConfig{});
  ASSERT_EQ(m.shape(), ref.shape());
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], ref[i], 1e-6);
  const auto wave = split_lines(read_file_text(dir / "waveform.csv"));
  EXPECT_EQ(wave.front(), "t,amplitude");
  EXPECT_EQ(wave.size(), 16001u);
}

TEST(Plots, SilenceIsSingleGrayLevel) {
  const auto dir = scratch("silence");
  render_audio_plots(AudioBuffer{std::vector<double>(16000, 0.0), 16000}, MfccConfig{}, dir);
  const auto img = load_pgm(read_file_bytes(dir / "spectrogram.pgm"));
  for (float p : img.pixels) EXPECT_EQ(p, img.pixels[0]);
}

TEST(FeatureCache, RoundTripAndErrors) {
  Prng prng(3);
  std::vector<FeatureRecord> recs;
  for (std::uint32_t i = 0; i < 3; ++i)
    recs.push_back({i, tensor_cast<double>(tensor_cast<float>(prng_uniform<double>(prng, Shape{4 + i, 13}, -9, 9)))});
  const auto bytes = encode_feature_cache(recs);
  EXPECT_TRUE(is_feature_cache(bytes));
  const auto back = decode_feature_cache(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].label, recs[i].label);
    EXPECT_EQ(back[i].features, recs[i].features);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_feature_cache(truncated), Error);
  auto bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_feature_cache(bad), Error);
}
