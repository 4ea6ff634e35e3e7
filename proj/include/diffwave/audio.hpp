#pragma once

// PCM16 WAV I/O, log-mel spectrograms, random crops, and a seeded synthetic
// tone corpus with a label manifest.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "diffwave/error.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/serialize.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

struct Waveform {
  std::vector<double> samples;
  std::uint32_t sample_rate = 16000;

  std::size_t size() const noexcept { return samples.size(); }
};

// ---------------------------------------------------------------------------
// WAV

/// Real sample to int16: clamp to [-1, 1], scale by 32768, round half away from zero, clamp to int16.
inline std::int16_t to_pcm16(double v) {
  if (!std::isfinite(v)) fail(ErrorKind::Numeric, "write_wav: non-finite sample");
  const double r = std::round(std::clamp(v, -1.0, 1.0) * 32768.0);
  return static_cast<std::int16_t>(std::clamp(r, -32768.0, 32767.0));
}

inline double from_pcm16(std::int16_t v) { return static_cast<double>(v) / 32768.0; }

/// The value a sample takes after a write/read round trip.
inline double quantize_pcm16(double v) { return from_pcm16(to_pcm16(v)); }

inline std::vector<char> encode_wav(const Waveform& w) {
  ByteWriter out;
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.bytes("RIFF", 4);
  out.pod(static_cast<std::uint32_t>(36 + data_bytes));
  out.bytes("WAVE", 4);
  out.bytes("fmt ", 4);
  out.pod(std::uint32_t{16});
  out.pod(std::uint16_t{1});  // PCM
  out.pod(std::uint16_t{1});  // mono
  out.pod(w.sample_rate);
  out.pod(static_cast<std::uint32_t>(w.sample_rate * 2));
  out.pod(std::uint16_t{2});
  out.pod(std::uint16_t{16});
  out.bytes("data", 4);
  out.pod(data_bytes);
  for (double v : w.samples) out.pod(to_pcm16(v));
  return out.buffer();
}

inline void write_wav(const Waveform& w, const std::filesystem::path& path) {
  require(w.sample_rate > 0, "write_wav: sample rate must be positive");
  const auto bytes = encode_wav(w);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline Waveform decode_wav(std::vector<char> bytes, const std::string& source) {
  ByteReader r(std::move(bytes), source);
  auto tag = [&] {
    std::string s(4, '\0');
    for (char& c : s) c = r.pod<char>();
    return s;
  };
  if (r.remaining() < 12 || tag() != "RIFF") fail(ErrorKind::Io, source + ": not a RIFF file (truncated header)");
  r.pod<std::uint32_t>();
  if (tag() != "WAVE") fail(ErrorKind::Io, source + ": RIFF type is not WAVE");
  bool have_fmt = false;
  Waveform w;
  while (r.remaining() >= 8) {
    const std::string id = tag();
    const auto size = r.pod<std::uint32_t>();
    if (id == "fmt ") {
      if (size < 16) fail(ErrorKind::Io, source + ": fmt chunk too short");
      const auto format = r.pod<std::uint16_t>();
      const auto channels = r.pod<std::uint16_t>();
      w.sample_rate = r.pod<std::uint32_t>();
      r.pod<std::uint32_t>();
      r.pod<std::uint16_t>();
      const auto bits = r.pod<std::uint16_t>();
      for (std::uint32_t i = 16; i < size; ++i) r.pod<char>();
      if (format != 1) fail(ErrorKind::Io, source + ": unsupported WAV format tag " + std::to_string(format) + " (need PCM)");
      if (channels != 1) fail(ErrorKind::Io, source + ": " + std::to_string(channels) + " channels (need mono)");
      if (bits != 16) fail(ErrorKind::Io, source + ": " + std::to_string(bits) + "-bit samples (need 16-bit)");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail(ErrorKind::Io, source + ": data chunk before fmt chunk");
      if (size > r.remaining()) fail(ErrorKind::Io, source + ": truncated data chunk");
      w.samples.resize(size / 2);
      for (auto& v : w.samples) v = from_pcm16(r.pod<std::int16_t>());
      return w;
    } else {
      if (size > r.remaining()) fail(ErrorKind::Io, source + ": truncated chunk '" + id + "'");
      for (std::uint32_t i = 0; i < size; ++i) r.pod<char>();
    }
    if (size % 2 && r.remaining()) r.pod<char>();
  }
  fail(ErrorKind::Io, source + ": no data chunk");
}

inline Waveform read_wav(const std::filesystem::path& path) { return decode_wav(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Spectra

/// |DFT| for bins 0..L/2.
inline std::vector<double> magnitude_spectrum(const std::vector<double>& x) {
  require(!x.empty(), "spectrum: empty signal");
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> X;
  fft.fwd(X, x);
  std::vector<double> mag(x.size() / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(X[k]);
  return mag;
}

/// Index of the largest-magnitude DFT bin, ignoring DC.
inline std::size_t dominant_fft_bin(const std::vector<double>& x) {
  const auto mag = magnitude_spectrum(x);
  if (mag.size() < 2) return 0;
  return static_cast<std::size_t>(std::max_element(mag.begin() + 1, mag.end()) - mag.begin());
}

struct MelConfig {
  std::uint32_t sample_rate = 22050;
  std::size_t n_fft = 1024;
  std::size_t hop = 256;
  std::size_t window = 1024;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means Nyquist
  double log_floor = 1e-5;
  bool center = true;
};

struct MelSpectrogram {
  Tensor<double> values;  // [n_mels, F], natural log
  MelConfig config;

  std::size_t frames() const { return values.dim(1); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Center frequencies of the triangular filters (HTK mel scale, equally spaced in mel).
inline std::vector<double> mel_band_centers(const MelConfig& c) {
  const double fmax = c.fmax > 0 ? c.fmax : c.sample_rate / 2.0;
  const double lo = hz_to_mel(c.fmin), hi = hz_to_mel(fmax);
  std::vector<double> pts(c.n_mels + 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(c.n_mels + 1));
  return pts;
}

/// [n_mels, n_fft/2 + 1] triangular filters with unit peak.
inline Tensor<double> mel_filterbank(const MelConfig& c) {
  require(c.n_mels >= 1 && c.n_fft >= 2, "mel: need n_mels >= 1 and n_fft >= 2");
  const auto pts = mel_band_centers(c);
  const std::size_t bins = c.n_fft / 2 + 1;
  Tensor<double> fb({c.n_mels, bins});
  for (std::size_t m = 0; m < c.n_mels; ++m) {
    const double l = pts[m], mid = pts[m + 1], r = pts[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * c.sample_rate / static_cast<double>(c.n_fft);
      double w = 0.0;
      if (f > l && f <= mid) w = (f - l) / (mid - l);
      else if (f > mid && f < r) w = (r - f) / (r - mid);
      fb.at(m, k) = w;
    }
  }
  return fb;
}

/// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

/// Hann-windowed magnitude STFT as [n_fft/2 + 1, F] with F = ceil(L / hop).
inline Tensor<double> stft_magnitude(const std::vector<double>& x, const MelConfig& c) {
  require(!x.empty(), "stft: empty waveform");
  require(c.hop >= 1 && c.window >= 1 && c.window <= c.n_fft, "stft: need hop >= 1 and 1 <= window <= n_fft");
  if (!c.center && x.size() < c.window)
    fail(ErrorKind::Config, "stft: waveform shorter than the window with centering disabled");
  const std::size_t L = x.size();
  const std::size_t F = (L + c.hop - 1) / c.hop;
  const std::size_t bins = c.n_fft / 2 + 1;

  std::vector<double> win(c.n_fft, 0.0);
  const std::size_t off = (c.n_fft - c.window) / 2;
  for (std::size_t n = 0; n < c.window; ++n)
    win[off + n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(c.window));

  Tensor<double> out({bins, F});
  Eigen::FFT<double> fft;
  std::vector<double> frame(c.n_fft);
  std::vector<std::complex<double>> X;
  const auto pad = static_cast<std::ptrdiff_t>(c.center ? c.n_fft / 2 : 0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t n = 0; n < c.n_fft; ++n) {
      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(f * c.hop + n) - pad;
      double v = 0.0;
      if (c.center) v = x[reflect_index(i, L)];
      else if (i >= 0 && static_cast<std::size_t>(i) < L) v = x[static_cast<std::size_t>(i)];
      frame[n] = v * win[n];
    }
    fft.fwd(X, frame);
    for (std::size_t k = 0; k < bins; ++k) out.at(k, f) = std::abs(X[k]);
  }
  return out;
}

/// Magnitude STFT -> mel filterbank -> ln(max(., floor)).
inline MelSpectrogram mel_spectrogram(const std::vector<double>& x, const MelConfig& c) {
  const auto mag = stft_magnitude(x, c);
  const auto fb = mel_filterbank(c);
  const std::size_t bins = mag.dim(0), F = mag.dim(1);
  MelSpectrogram out{Tensor<double>({c.n_mels, F}), c};
  for (std::size_t m = 0; m < c.n_mels; ++m)
    for (std::size_t f = 0; f < F; ++f) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb.at(m, k) * mag.at(k, f);
      out.values.at(m, f) = std::log(std::max(e, c.log_floor));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Cropping

/// Uniform offset in [0, L - crop_len]; inputs shorter than the crop are zero-padded on the right.
inline std::vector<double> random_crop(const std::vector<double>& x, std::size_t crop_len, Rng& rng,
                                       std::size_t* offset_out = nullptr) {
  require(crop_len >= 1, "random_crop: crop_len must be >= 1");
  std::size_t off = 0;
  std::vector<double> out(crop_len, 0.0);
  if (x.size() >= crop_len) {
    off = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(x.size() - crop_len)));
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(off), crop_len, out.begin());
  } else {
    std::copy(x.begin(), x.end(), out.begin());
  }
  if (offset_out) *offset_out = off;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tone corpus

struct CorpusSpec {
  std::size_t num_utterances = 200;
  std::size_t length = 1024;
  std::uint32_t sample_rate = 4000;
  /// Tone frequencies in Hz; label i is frequencies[i].
  std::vector<double> frequencies;
  double amplitude_min = 0.3;
  double amplitude_max = 0.9;
  double noise_floor = 0.0;  // std of additive white noise
  double chord_probability = 0.0;
  bool random_phase = true;  // off: every tone starts at phase 0
  std::size_t fade = 64;  // raised-cosine fade-in/out length
  std::uint64_t seed = 0;

  void validate() const {
    require(num_utterances >= 1 && length >= 1 && sample_rate > 0, "corpus: counts and sample rate must be positive");
    require(!frequencies.empty(), "corpus: need at least one tone frequency");
    for (double f : frequencies)
      require(f > 0 && f < sample_rate / 2.0, "corpus: frequency " + std::to_string(f) + " Hz not below Nyquist");
    require(amplitude_min >= 0 && amplitude_min <= amplitude_max && amplitude_max <= 1.0,
            "corpus: need 0 <= amplitude_min <= amplitude_max <= 1");
    require(noise_floor >= 0 && chord_probability >= 0 && chord_probability <= 1,
            "corpus: noise_floor and chord_probability out of range");
  }
};

/// Frequencies sitting exactly on DFT bins of a length-L signal.
inline std::vector<double> bin_frequencies(const std::vector<std::size_t>& bins, std::size_t L,
                                           std::uint32_t sample_rate) {
  std::vector<double> f;
  for (auto b : bins) f.push_back(static_cast<double>(b) * sample_rate / static_cast<double>(L));
  return f;
}

/// Ten well-separated tones used by the desk-scale experiments (4 kHz, L = 1024).
inline CorpusSpec default_tone_corpus() {
  CorpusSpec s;
  s.frequencies = bin_frequencies({20, 30, 40, 55, 70, 85, 100, 120, 140, 160}, s.length, s.sample_rate);
  return s;
}

struct LabeledWave {
  Waveform wave;
  int label = 0;
  std::string path;  // relative to the corpus root once written
};

/// Utterance i carries label i mod K, so counts are balanced. Samples are
/// quantized to the PCM16 grid so in-memory and on-disk corpora agree.
inline std::vector<LabeledWave> generate_tone_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t K = spec.frequencies.size(), L = spec.length;
  const std::size_t fade = std::min(spec.fade, L / 2);
  std::vector<LabeledWave> out;
  out.reserve(spec.num_utterances);
  for (std::size_t i = 0; i < spec.num_utterances; ++i) {
    LabeledWave u;
    u.label = static_cast<int>(i % K);
    u.wave.sample_rate = spec.sample_rate;
    u.wave.samples.assign(L, 0.0);
    auto add_tone = [&](double freq, double amp) {
      const double phase = spec.random_phase ? 2.0 * std::numbers::pi * rng.uniform() : 0.0;
      for (std::size_t n = 0; n < L; ++n)
        u.wave.samples[n] += amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(n) / spec.sample_rate + phase);
    };
    const double amp = spec.amplitude_min + (spec.amplitude_max - spec.amplitude_min) * rng.uniform();
    add_tone(spec.frequencies[static_cast<std::size_t>(u.label)], amp);
    if (K > 1 && spec.chord_probability > 0 && rng.uniform() < spec.chord_probability) {
      const auto other = (static_cast<std::size_t>(u.label) + 1 + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(K - 2)))) % K;
      add_tone(spec.frequencies[other], 0.5 * amp);
    }
    for (std::size_t n = 0; n < fade; ++n) {
      const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n) / static_cast<double>(fade));
      u.wave.samples[n] *= g;
      u.wave.samples[L - 1 - n] *= g;
    }
    if (spec.noise_floor > 0)
      for (auto& v : u.wave.samples) v += spec.noise_floor * rng.normal();
    for (auto& v : u.wave.samples) v = quantize_pcm16(v);
    char name[32];
    std::snprintf(name, sizeof name, "utt_%05zu.wav", i);
    u.path = name;
    out.push_back(std::move(u));
  }
  return out;
}

inline constexpr const char* kManifestName = "manifest.tsv";

/// Writes the WAVs and a "relative_path<TAB>label" manifest.
inline std::vector<LabeledWave> make_synthetic_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  auto corpus = generate_tone_corpus(spec);
  std::ostringstream manifest;
  for (const auto& u : corpus) {
    write_wav(u.wave, dir / u.path);
    manifest << u.path << '\t' << u.label << '\n';
  }
  write_file_atomic(dir / kManifestName, manifest.str());
  return corpus;
}

/// Reads a corpus directory. With a manifest, labels come from it; otherwise every
/// *.wav (sorted by name) is loaded with label -1.
inline std::vector<LabeledWave> load_corpus(const std::filesystem::path& dir) {
  std::vector<LabeledWave> out;
  const auto manifest = dir / kManifestName;
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    if (!in) fail(ErrorKind::Io, "cannot open '" + manifest.string() + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        fail(ErrorKind::Io, manifest.string() + ":" + std::to_string(lineno) + ": expected path<TAB>label");
      LabeledWave u;
      u.path = line.substr(0, tab);
      try {
        u.label = std::stoi(line.substr(tab + 1));
      } catch (const std::exception&) {
        fail(ErrorKind::Io, manifest.string() + ":" + std::to_string(lineno) + ": bad label");
      }
      u.wave = read_wav(dir / u.path);
      out.push_back(std::move(u));
    }
    return out;
  }
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::Io, "'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back({read_wav(f), -1, f.filename().string()});
  return out;
}

}  // namespace diffwave
