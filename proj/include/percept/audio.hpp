#pragma once

// Audio front end: PCM-16 WAV ingestion, framing, Hamming window, radix-2
// FFT power spectrum, HTK mel filterbank, orthonormal DCT-II, MFCC
// assembly, standard scaling, clip concatenation, plot artifacts, and the
// binary MFCC feature cache.

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "percept/io.hpp"
#include "percept/tensor.hpp"

namespace percept {

struct AudioBuffer {
  std::vector<double> samples;  // mono, nominally in [-1, 1]
  std::uint32_t sample_rate = 0;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// ---------------------------------------------------------------------------
// WAV

// RIFF/WAVE, PCM format code 1, 16-bit, mono or stereo. Stereo is averaged to
// mono; unknown chunks are skipped.
inline AudioBuffer parse_wav(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "WAV");
  require(r.remaining() >= 12, ErrorKind::Format, "WAV: file too short for a RIFF header");
  require(r.raw(4) == "RIFF", ErrorKind::Format, "WAV: missing RIFF magic");
  r.u32();
  require(r.raw(4) == "WAVE", ErrorKind::Format, "WAV: missing WAVE form type");

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (r.remaining() >= 8) {
    const std::string id = r.raw(4);
    const std::uint32_t size = r.u32();
    if (id == "fmt ") {
      require(size >= 16 && r.remaining() >= size, ErrorKind::Format, "WAV: truncated fmt chunk");
      ByteReader f(r.take(size), "WAV fmt chunk");
      const std::uint16_t format = f.u16();
      require(format == 1, ErrorKind::Format,
              "WAV: unsupported format code " + std::to_string(format) + " (only PCM = 1)");
      channels = f.u16();
      rate = f.u32();
      f.u32();  // byte rate
      f.u16();  // block align
      bits = f.u16();
      require(bits == 16, ErrorKind::Format, "WAV: unsupported bit depth " + std::to_string(bits) + " (only 16)");
      require(channels == 1 || channels == 2, ErrorKind::Format,
              "WAV: unsupported channel count " + std::to_string(channels));
      require(rate > 0, ErrorKind::Format, "WAV: sample rate is zero");
      have_fmt = true;
    } else if (id == "data") {
      require(have_fmt, ErrorKind::Format, "WAV: missing fmt chunk before data");
      require(size <= r.remaining(), ErrorKind::Format,
              "WAV: truncated data chunk (declares " + std::to_string(size) + " bytes, " +
                  std::to_string(r.remaining()) + " present)");
      const std::size_t frame_bytes = 2u * channels;
      require(size % frame_bytes == 0, ErrorKind::Format, "WAV: data chunk is not a whole number of frames");
      ByteReader d(r.take(size), "WAV data chunk");
      AudioBuffer buf;
      buf.sample_rate = rate;
      buf.samples.reserve(size / frame_bytes);
      while (!d.done()) {
        double acc = 0;
        for (std::uint16_t c = 0; c < channels; ++c)
          acc += static_cast<double>(static_cast<std::int16_t>(d.u16())) / 32768.0;
        buf.samples.push_back(acc / channels);
      }
      return buf;
    } else {
      require(size <= r.remaining(), ErrorKind::Format, "WAV: truncated '" + id + "' chunk");
      r.skip(size);
    }
    if (size % 2 == 1 && r.remaining() > 0) r.skip(1);  // RIFF word alignment
  }
  require(have_fmt, ErrorKind::Format, "WAV: missing fmt chunk");
  fail(ErrorKind::Format, "WAV: missing data chunk");
}

// Canonical 44-byte-header PCM-16 mono file; samples are clipped to [-1, 1).
inline Bytes encode_wav_pcm16(std::span<const double> samples, std::uint32_t sample_rate) {
  ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  w.raw("RIFF");
  w.u32(36 + data_bytes);
  w.raw("WAVE");
  w.raw("fmt ");
  w.u32(16);
  w.u16(1);
  w.u16(1);
  w.u32(sample_rate);
  w.u32(sample_rate * 2);
  w.u16(2);
  w.u16(16);
  w.raw("data");
  w.u32(data_bytes);
  for (double s : samples) {
    const long v = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
    w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(v, -32768L, 32767L))));
  }
  return w.take();
}

// ---------------------------------------------------------------------------
// MFCC configuration

struct MfccConfig {
  double frame_len_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 26;
  std::size_t n_coeffs = 13;
  std::size_t fft_size = 0;  // 0: next power of two >= frame length
  double fmin = 0.0;
  double fmax = 0.0;  // 0: Nyquist
};

// MfccConfig resolved against a sample rate.
struct FrameParams {
  std::size_t frame_len, hop, fft_size;
  double fmin, fmax;
  std::size_t n_mels, n_coeffs;
};

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline FrameParams resolve_frames(const MfccConfig& c, std::uint32_t sample_rate) {
  require(sample_rate > 0, ErrorKind::Argument, "sample rate must be > 0");
  FrameParams f{};
  f.frame_len = static_cast<std::size_t>(std::lround(sample_rate * c.frame_len_ms / 1000.0));
  f.hop = static_cast<std::size_t>(std::lround(sample_rate * c.hop_ms / 1000.0));
  require(f.frame_len >= 2 && f.hop >= 1, ErrorKind::Argument, "frame length / hop too small for this sample rate");
  f.fft_size = c.fft_size ? c.fft_size : next_power_of_two(f.frame_len);
  require(is_power_of_two(f.fft_size), ErrorKind::Argument, "fft_size must be a power of two");
  require(f.frame_len <= f.fft_size, ErrorKind::Argument, "frame length exceeds fft_size");
  const double nyquist = sample_rate / 2.0;
  f.fmin = c.fmin;
  f.fmax = c.fmax > 0 ? c.fmax : nyquist;
  require(f.fmin >= 0 && f.fmin < f.fmax && f.fmax <= nyquist, ErrorKind::Argument,
          "need 0 <= fmin < fmax <= Nyquist");
  require(c.n_coeffs >= 1 && c.n_coeffs <= c.n_mels, ErrorKind::Argument, "need 1 <= n_coeffs <= n_mels");
  f.n_mels = c.n_mels;
  f.n_coeffs = c.n_coeffs;
  return f;
}

// ---------------------------------------------------------------------------
// Framing and windowing

// [T, frame_len] with T = 1 + floor((len - frame_len) / hop); the trailing
// partial frame is dropped.
inline Tensor64 frame_signal(const AudioBuffer& buf, const MfccConfig& config) {
  const auto f = resolve_frames(config, buf.sample_rate);
  require(buf.samples.size() >= f.frame_len, ErrorKind::Argument,
          "signal of " + std::to_string(buf.samples.size()) + " samples is shorter than one frame (" +
              std::to_string(f.frame_len) + ")");
  const std::size_t T = 1 + (buf.samples.size() - f.frame_len) / f.hop;
  Tensor64 frames(Shape{T, f.frame_len});
  for (std::size_t t = 0; t < T; ++t)
    std::copy_n(buf.samples.begin() + t * f.hop, f.frame_len, frames.data().begin() + t * f.frame_len);
  return frames;
}

inline std::vector<double> hamming_window(std::span<const double> frame) {
  const std::size_t N = frame.size();
  require(N >= 2, ErrorKind::Argument, "Hamming window needs length >= 2");
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n)
    out[n] = frame[n] * (0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (N - 1)));
  return out;
}

// ---------------------------------------------------------------------------
// FFT

// In-place iterative radix-2 decimation-in-time FFT (forward, no scaling).
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) fail(ErrorKind::Argument, "FFT size must be a power of two, got " + std::to_string(n));
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    // Twiddles computed directly per index; a running product drifts.
    std::vector<std::complex<double>> w(half);
    for (std::size_t k = 0; k < half; ++k) w[k] = std::polar(1.0, -2.0 * std::numbers::pi * k / len);
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < half; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + half] * w[k];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
  }
}

// One-sided |X[k]|^2, k = 0..fft_size/2, of the frame zero-padded to fft_size.
inline std::vector<double> power_spectrum(std::span<const double> frame, std::size_t fft_size) {
  if (!is_power_of_two(fft_size))
    fail(ErrorKind::Argument, "fft_size must be a power of two, got " + std::to_string(fft_size));
  require(frame.size() <= fft_size, ErrorKind::Argument, "frame longer than fft_size");
  std::vector<std::complex<double>> a(fft_size);
  for (std::size_t i = 0; i < frame.size(); ++i) a[i] = frame[i];
  fft_inplace(a);
  std::vector<double> p(fft_size / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::norm(a[k]);
  return p;
}

// ---------------------------------------------------------------------------
// Mel scale (HTK)

inline double hz_to_mel(double hz) {
  require(hz >= 0, ErrorKind::Argument, "hz_to_mel: negative frequency");
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  require(mel >= 0, ErrorKind::Argument, "mel_to_hz: negative mel value");
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// FFT bin of each of the n_mels + 2 mel-spaced edge points.
inline std::vector<std::size_t> mel_filter_bins(const FrameParams& f, std::uint32_t sample_rate) {
  const double lo = hz_to_mel(f.fmin), hi = hz_to_mel(f.fmax);
  std::vector<std::size_t> bins(f.n_mels + 2);
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const double mel = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(f.n_mels + 1);
    const double hz = mel_to_hz(mel);
    bins[i] = std::min(static_cast<std::size_t>(std::floor((f.fft_size + 1) * hz / sample_rate)), f.fft_size / 2);
  }
  return bins;
}

// [n_mels, fft_size/2 + 1] triangles: filter m rises from bin[m] to a peak of
// exactly 1 at bin[m+1] and falls to zero at bin[m+2].
inline Tensor64 build_mel_filterbank(const MfccConfig& config, std::uint32_t sample_rate) {
  const auto f = resolve_frames(config, sample_rate);
  const auto bins = mel_filter_bins(f, sample_rate);
  for (std::size_t i = 1; i < bins.size(); ++i)
    require(bins[i] > bins[i - 1], ErrorKind::Argument,
            std::to_string(f.n_mels) + " mel filters do not fit distinct FFT bins at fft_size " +
                std::to_string(f.fft_size) + " and " + std::to_string(sample_rate) + " Hz");
  const std::size_t n_bins = f.fft_size / 2 + 1;
  Tensor64 fb(Shape{f.n_mels, n_bins});
  for (std::size_t m = 0; m < f.n_mels; ++m) {
    const double left = static_cast<double>(bins[m]);
    const double center = static_cast<double>(bins[m + 1]);
    const double right = static_cast<double>(bins[m + 2]);
    for (std::size_t k = bins[m]; k <= bins[m + 2]; ++k) {
      const double kk = static_cast<double>(k);
      fb.at(m, k) = kk <= center ? (kk - left) / (center - left) : (right - kk) / (right - center);
    }
  }
  return fb;
}

// ---------------------------------------------------------------------------
// DCT-II

// Orthonormal DCT-II, first n_coeffs outputs.
inline std::vector<double> dct2(std::span<const double> v, std::size_t n_coeffs) {
  const std::size_t N = v.size();
  require(N >= 1 && n_coeffs <= N, ErrorKind::Argument,
          "dct2: n_coeffs " + std::to_string(n_coeffs) + " exceeds input length " + std::to_string(N));
  std::vector<double> out(n_coeffs);
  for (std::size_t k = 0; k < n_coeffs; ++k) {
    double s = 0;
    for (std::size_t n = 0; n < N; ++n) s += v[n] * std::cos(std::numbers::pi * k * (2.0 * n + 1.0) / (2.0 * N));
    out[k] = s * (k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N));
  }
  return out;
}

// Inverse of the orthonormal DCT-II (a DCT-III) for a full-length input.
inline std::vector<double> idct2(std::span<const double> c) {
  const std::size_t N = c.size();
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    double s = c[0] * std::sqrt(1.0 / N);
    for (std::size_t k = 1; k < N; ++k)
      s += c[k] * std::sqrt(2.0 / N) * std::cos(std::numbers::pi * k * (2.0 * n + 1.0) / (2.0 * N));
    out[n] = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// MFCC

inline constexpr double kLogFloor = 1e-10;

// [T, fft_size/2 + 1] power spectra of Hamming-windowed frames.
inline Tensor64 power_spectrogram(const AudioBuffer& buf, const MfccConfig& config) {
  const auto f = resolve_frames(config, buf.sample_rate);
  const auto frames = frame_signal(buf, config);
  const std::size_t T = frames.dim(0), n_bins = f.fft_size / 2 + 1;
  Tensor64 spec(Shape{T, n_bins});
  for (std::size_t t = 0; t < T; ++t) {
    const auto w = hamming_window(std::span<const double>(frames.data().data() + t * f.frame_len, f.frame_len));
    const auto p = power_spectrum(w, f.fft_size);
    std::copy(p.begin(), p.end(), spec.data().begin() + t * n_bins);
  }
  return spec;
}

// frame -> Hamming -> power spectrum -> mel filterbank -> ln(e + 1e-10) -> DCT-II.
inline Tensor64 mfcc(const AudioBuffer& buf, const MfccConfig& config) {
  const auto f = resolve_frames(config, buf.sample_rate);
  const auto fb = build_mel_filterbank(config, buf.sample_rate);
  const auto spec = power_spectrogram(buf, config);
  const std::size_t T = spec.dim(0), n_bins = spec.dim(1);
  Tensor64 out(Shape{T, f.n_coeffs});
  std::vector<double> logmel(f.n_mels);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t m = 0; m < f.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < n_bins; ++k) e += fb.at(m, k) * spec.at(t, k);
      logmel[m] = std::log(e + kLogFloor);
    }
    const auto c = dct2(logmel, f.n_coeffs);
    std::copy(c.begin(), c.end(), out.data().begin() + t * f.n_coeffs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standard scaling

struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> std;  // population standard deviation

  std::size_t width() const noexcept { return mean.size(); }
};

// Fits on the rows of a [R, D] matrix (R >= 2).
inline FeatureScaler scaler_fit(const Tensor64& rows) {
  require(rows.rank() == 2 && rows.dim(0) >= 2, ErrorKind::Argument, "scaler_fit needs >= 2 rows");
  const std::size_t R = rows.dim(0), D = rows.dim(1);
  FeatureScaler s{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t d = 0; d < D; ++d) s.mean[d] += rows.at(r, d);
  for (double& m : s.mean) m /= static_cast<double>(R);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t d = 0; d < D; ++d) {
      const double x = rows.at(r, d) - s.mean[d];
      s.std[d] += x * x;
    }
  for (double& v : s.std) v = std::sqrt(v / static_cast<double>(R));
  return s;
}

inline double scaler_divisor(double std) { return std < 1e-12 ? 1.0 : std; }

inline Tensor64 scaler_transform(const FeatureScaler& s, const Tensor64& rows) {
  require(rows.rank() == 2 && rows.dim(1) == s.width(), ErrorKind::Shape,
          "scaler width " + std::to_string(s.width()) + " does not match features " + rows.shape().str());
  Tensor64 out = rows;
  for (std::size_t r = 0; r < rows.dim(0); ++r)
    for (std::size_t d = 0; d < s.width(); ++d) out.at(r, d) = (rows.at(r, d) - s.mean[d]) / scaler_divisor(s.std[d]);
  return out;
}

// ---------------------------------------------------------------------------
// Snippets

// Concatenates clips in order, truncated to target_seconds.
inline AudioBuffer concat_snippets(std::span<const AudioBuffer> clips, double target_seconds) {
  require(!clips.empty(), ErrorKind::Argument, "concat_snippets: no clips");
  require(target_seconds > 0, ErrorKind::Argument, "concat_snippets: target must be > 0");
  AudioBuffer out;
  out.sample_rate = clips.front().sample_rate;
  const auto target = static_cast<std::size_t>(std::llround(target_seconds * out.sample_rate));
  for (const auto& c : clips) {
    require(c.sample_rate == out.sample_rate, ErrorKind::Argument,
            "concat_snippets: mixed sample rates " + std::to_string(out.sample_rate) + " and " +
                std::to_string(c.sample_rate));
    out.samples.insert(out.samples.end(), c.samples.begin(), c.samples.end());
  }
  if (out.samples.size() > target) out.samples.resize(target);
  return out;
}

// ---------------------------------------------------------------------------
// Plot artifacts

// Renders a [T, F] matrix as a PGM with time on the horizontal axis and the
// first feature at the bottom row.
inline Bytes matrix_to_pgm(const Tensor64& m) {
  const std::size_t T = m.dim(0), F = m.dim(1);
  std::vector<double> img(T * F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) img[(F - 1 - f) * T + t] = m.at(t, f);
  const auto gray = to_gray_levels(img);
  return encode_pgm(T, F, gray);
}

// waveform.csv (t, amplitude), spectrogram.{csv,pgm} in dB, mfcc.{csv,pgm}.
inline void render_audio_plots(const AudioBuffer& buf, const MfccConfig& config,
                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec && std::filesystem::is_directory(out_dir), ErrorKind::Io,
          "cannot create output directory '" + out_dir.string() + "'");

  std::ostringstream wave;
  wave << "t,amplitude\n" << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < buf.samples.size(); ++i)
    wave << static_cast<double>(i) / buf.sample_rate << ',' << buf.samples[i] << '\n';
  write_file_text(out_dir / "waveform.csv", wave.str());

  auto spec = power_spectrogram(buf, config);
  for (double& v : spec.data()) v = 10.0 * std::log10(v + kLogFloor);
  write_file_text(out_dir / "spectrogram.csv", matrix_to_csv(spec));
  write_file_bytes(out_dir / "spectrogram.pgm", matrix_to_pgm(spec));

  const auto features = mfcc(buf, config);
  write_file_text(out_dir / "mfcc.csv", matrix_to_csv(features));
  write_file_bytes(out_dir / "mfcc.pgm", matrix_to_pgm(features));
}

// ---------------------------------------------------------------------------
// Feature cache: "MFCC", u32 version = 1, then records of
// (label u32, T u32, n_coeffs u32, T*n_coeffs f32 row-major), all little-endian.

inline constexpr std::uint32_t kFeatureCacheVersion = 1;

struct FeatureRecord {
  std::uint32_t label = 0;
  Tensor64 features;  // [T, n_coeffs]
};

inline Bytes encode_feature_cache(std::span<const FeatureRecord> records) {
  ByteWriter w;
  w.raw("MFCC");
  w.u32(kFeatureCacheVersion);
  for (const auto& r : records) {
    w.u32(r.label);
    w.u32(static_cast<std::uint32_t>(r.features.dim(0)));
    w.u32(static_cast<std::uint32_t>(r.features.dim(1)));
    for (double v : r.features.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

inline bool is_feature_cache(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) == "MFCC";
}

inline std::vector<FeatureRecord> decode_feature_cache(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "feature cache");
  require(r.remaining() >= 8 && r.raw(4) == "MFCC", ErrorKind::Format, "feature cache: bad magic");
  const std::uint32_t version = r.u32();
  require(version == kFeatureCacheVersion, ErrorKind::Format,
          "feature cache: unsupported version " + std::to_string(version));
  std::vector<FeatureRecord> out;
  while (!r.done()) {
    FeatureRecord rec;
    rec.label = r.u32();
    const std::uint32_t T = r.u32(), C = r.u32();
    require(T >= 1 && C >= 1, ErrorKind::Format, "feature cache: empty record");
    std::vector<double> data(static_cast<std::size_t>(T) * C);
    for (double& v : data) v = r.f32();
    rec.features = Tensor64(Shape{T, C}, std::move(data));
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace percept
