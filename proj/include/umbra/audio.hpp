#pragma once

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "umbra/common.hpp"

namespace umbra {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }

  void validate() const {
    require(sample_rate > 0, "Waveform: sample_rate must be positive");
    for (double s : samples) require(std::isfinite(s), "Waveform: non-finite sample");
  }

  double rms() const {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (double s : samples) acc += s * s;
    return std::sqrt(acc / samples.size());
  }

  double peak() const {
    double p = 0.0;
    for (double s : samples) p = std::max(p, std::abs(s));
    return p;
  }
};

struct MelConfig {
  int n_fft = 400;   // 25 ms at 16 kHz
  int hop = 160;     // 10 ms
  int n_mels = 40;
  double fmin = 0.0;
  double fmax = 8000.0;
  int sample_rate = 16000;

  void validate() const {
    require(n_fft > 0 && hop > 0 && hop <= n_fft, "MelConfig: need 0 < hop <= n_fft");
    require(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0,
            "MelConfig: need 0 <= fmin < fmax <= sample_rate/2");
    require(n_mels >= 1, "MelConfig: n_mels must be >= 1");
    require(sample_rate > 0, "MelConfig: sample_rate must be positive");
  }

  int n_bins() const { return n_fft / 2 + 1; }
  int frame_count(size_t n_samples) const {
    return 1 + static_cast<int>((n_samples - static_cast<size_t>(n_fft)) / hop);
  }
};

inline constexpr double kLogMelEps = 1e-5;

struct MelSpectrogram {
  Mat values;  // n_mels x N, log-compressed
  MelConfig config;

  int F() const { return static_cast<int>(values.rows()); }
  int N() const { return static_cast<int>(values.cols()); }

  void validate() const {
    config.validate();
    require(values.rows() == config.n_mels, "MelSpectrogram: row count != n_mels");
    require(values.cols() >= 1, "MelSpectrogram: need at least one frame");
    require(values.allFinite(), "MelSpectrogram: non-finite entry");
  }
};

// Speech-to-environment ratio in [0, 1]; 0 means the environment is loudest
// relative to the speech.
struct SerValue {
  double value = 1.0;

  SerValue() = default;
  explicit SerValue(double v) : value(v) {
    require(v >= 0.0 && v <= 1.0, "SerValue: must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// FFT (FFTW, double precision). Plan creation is serialized; each instance
// owns its buffers, so distinct instances may run concurrently.
// ---------------------------------------------------------------------------

namespace detail {
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

class Dft {
 public:
  explicit Dft(int n) : n_(n) {
    require(n > 0, "Dft: size must be positive");
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    real_ = fftw_alloc_real(n);
    cplx_ = fftw_alloc_complex(n / 2 + 1);
    fwd_ = fftw_plan_dft_r2c_1d(n, real_, cplx_, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(n, cplx_, real_, FFTW_ESTIMATE);
  }

  ~Dft() {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(real_);
    fftw_free(cplx_);
  }

  Dft(const Dft&) = delete;
  Dft& operator=(const Dft&) = delete;

  int size() const { return n_; }
  int n_bins() const { return n_ / 2 + 1; }

  // real[n] -> complex[n/2+1]
  void forward(const double* in, std::complex<double>* out) {
    std::memcpy(real_, in, sizeof(double) * n_);
    fftw_execute(fwd_);
    for (int k = 0; k < n_bins(); ++k) out[k] = {cplx_[k][0], cplx_[k][1]};
  }

  // complex[n/2+1] -> real[n], normalized by 1/n
  void inverse(const std::complex<double>* in, double* out) {
    for (int k = 0; k < n_bins(); ++k) {
      cplx_[k][0] = in[k].real();
      cplx_[k][1] = in[k].imag();
    }
    fftw_execute(inv_);
    const double scale = 1.0 / n_;
    for (int i = 0; i < n_; ++i) out[i] = real_[i] * scale;
  }

 private:
  int n_;
  double* real_;
  fftw_complex* cplx_;
  fftw_plan fwd_;
  fftw_plan inv_;
};

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  return w;
}

// Left-aligned framing, Hann window, no padding: N = 1 + (len - n_fft)/hop.
inline Eigen::MatrixXcd stft(const Waveform& wave, const MelConfig& cfg) {
  cfg.validate();
  wave.validate();
  require(wave.size() >= static_cast<size_t>(cfg.n_fft), "stft: wave shorter than n_fft");
  require(wave.sample_rate == cfg.sample_rate, "stft: sample-rate mismatch");

  const int n_frames = cfg.frame_count(wave.size());
  const int n_bins = cfg.n_bins();
  const std::vector<double> win = hann_window(cfg.n_fft);

  Eigen::MatrixXcd spec(n_bins, n_frames);
  Dft dft(cfg.n_fft);
  std::vector<double> frame(cfg.n_fft);
  std::vector<std::complex<double>> out(n_bins);
  for (int f = 0; f < n_frames; ++f) {
    const double* src = wave.samples.data() + static_cast<size_t>(f) * cfg.hop;
    for (int i = 0; i < cfg.n_fft; ++i) frame[i] = src[i] * win[i];
    dft.forward(frame.data(), out.data());
    for (int k = 0; k < n_bins; ++k) spec(k, f) = out[k];
  }
  return spec;
}

// Overlap-add inverse with Hann synthesis window and window-square
// normalization. Output length (N-1)*hop + n_fft.
inline Waveform istft(const Eigen::MatrixXcd& spec, const MelConfig& cfg) {
  cfg.validate();
  require(spec.rows() == cfg.n_bins(), "istft: bin count mismatch");
  const int n_frames = static_cast<int>(spec.cols());
  const size_t out_len = static_cast<size_t>(n_frames - 1) * cfg.hop + cfg.n_fft;
  const std::vector<double> win = hann_window(cfg.n_fft);

  std::vector<double> acc(out_len, 0.0), wsum(out_len, 0.0);
  Dft dft(cfg.n_fft);
  std::vector<std::complex<double>> in(cfg.n_bins());
  std::vector<double> frame(cfg.n_fft);
  for (int f = 0; f < n_frames; ++f) {
    for (int k = 0; k < cfg.n_bins(); ++k) in[k] = spec(k, f);
    dft.inverse(in.data(), frame.data());
    const size_t off = static_cast<size_t>(f) * cfg.hop;
    for (int i = 0; i < cfg.n_fft; ++i) {
      acc[off + i] += frame[i] * win[i];
      wsum[off + i] += win[i] * win[i];
    }
  }
  Waveform out;
  out.sample_rate = cfg.sample_rate;
  out.samples.resize(out_len);
  // floor on the normalizer keeps inconsistent spectra from blowing up where
  // the synthesis window tapers to zero
  for (size_t i = 0; i < out_len; ++i)
    out.samples[i] = acc[i] / std::max(wsum[i], 1e-2);
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filterbank on the mel scale, n_mels x n_bins, unnormalized.
inline Mat mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const int n_bins = cfg.n_bins();
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> centers(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    centers[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));

  Mat fb = Mat::Zero(cfg.n_mels, n_bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      if (f <= lo || f >= hi) continue;
      fb(m, k) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

// Center frequency (Hz) of mel band m under cfg.
inline double mel_band_center(const MelConfig& cfg, int m) {
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  return mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (cfg.n_mels + 1));
}

// Waveform -> log-mel spectrogram: Hann STFT power spectrum through the mel
// filterbank, log(mel + 1e-5).
inline MelSpectrogram stft_mel(const Waveform& wave, const MelConfig& cfg) {
  const Eigen::MatrixXcd spec = stft(wave, cfg);
  const Mat fb = mel_filterbank(cfg);
  const Mat power = spec.cwiseAbs2();
  MelSpectrogram mel;
  mel.config = cfg;
  mel.values = ((fb * power).array() + kLogMelEps).log().matrix();
  return mel;
}

// Phase reconstruction from a log-mel spectrogram. The mel energies are mapped
// back to a linear-frequency magnitude estimate through a regularized
// pseudo-inverse of the filterbank, then phases are recovered by accelerated
// Griffin-Lim. Initial phases follow the per-bin hop advance, which is already
// consistent for steady narrowband content. Deterministic for a fixed seed.
inline Waveform griffin_lim(const MelSpectrogram& mel, const MelConfig& cfg, int iters,
                            uint64_t seed = 0) {
  mel.validate();
  cfg.validate();
  require(iters >= 1, "griffin_lim: iters must be >= 1");
  require(mel.F() == cfg.n_mels, "griffin_lim: mel band count mismatch");
  (void)seed;

  const Mat fb = mel_filterbank(cfg);
  const int n_bins = cfg.n_bins();
  const int n_frames = mel.N();

  // mel power -> linear power: nonnegative least squares via multiplicative
  // updates, which keeps energy inside the right bands
  const Mat mel_power = (mel.values.array().exp() - kLogMelEps).cwiseMax(0.0).matrix();
  const Mat numer = fb.transpose() * mel_power;
  Mat lin_power = numer;
  for (int it = 0; it < 100; ++it) {
    const Mat denom = fb.transpose() * (fb * lin_power);
    lin_power = lin_power.cwiseProduct(numer).cwiseQuotient(denom.cwiseMax(1e-30));
  }
  Mat mag = lin_power.cwiseSqrt();

  Eigen::MatrixXcd spec(n_bins, n_frames);
  for (int f = 0; f < n_frames; ++f)
    for (int k = 0; k < n_bins; ++k) {
      const double phase = 2.0 * kPi * k * cfg.hop * f / cfg.n_fft;
      spec(k, f) = std::polar(mag(k, f), phase);
    }

  const auto force_mag = [&](Eigen::MatrixXcd& s) {
    for (int f = 0; f < n_frames; ++f)
      for (int k = 0; k < n_bins; ++k) {
        const std::complex<double> v = s(k, f);
        const double a = std::abs(v);
        s(k, f) = a > 1e-12 ? std::complex<double>(v * (mag(k, f) / a))
                            : std::complex<double>(mag(k, f), 0.0);
      }
  };

  const double momentum = 0.99;
  Eigen::MatrixXcd prev = spec;
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXcd proj = spec;
    force_mag(proj);
    Eigen::MatrixXcd re = stft(istft(proj, cfg), cfg);
    Eigen::MatrixXcd next = re + momentum * (re - prev);
    prev = re;
    spec = next;
  }
  force_mag(spec);
  return istft(spec, cfg);
}

// Linear SNR->SER map: [-5 dB, 20 dB] -> [0, 1], clamped outside.
inline SerValue snr_to_ser(double snr_db) {
  return SerValue(std::clamp((snr_db + 5.0) / 25.0, 0.0, 1.0));
}

inline double ser_to_snr_db(const SerValue& ser) { return 25.0 * ser.value - 5.0; }

// Tiles (loops) or truncates a waveform to an exact sample count.
inline Waveform tile_to_length(const Waveform& wave, size_t n) {
  require(!wave.samples.empty(), "tile_to_length: empty waveform");
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) out.samples[i] = wave.samples[i % wave.samples.size()];
  return out;
}

struct MixResult {
  Waveform wave;
  double env_gain = 0.0;   // gain applied to the (tiled) environment
  double norm_gain = 1.0;  // uniform peak-normalization factor
};

// Scales the environment so the speech/env power ratio hits the SNR implied by
// ser (25*ser - 5 dB), adds, then peak-normalizes to <= 0.99. The environment
// is tiled or truncated to the speech length first.
inline MixResult mix_at_ser_detail(const Waveform& speech, const Waveform& env,
                                   const SerValue& ser) {
  speech.validate();
  env.validate();
  require(speech.sample_rate == env.sample_rate, "mix_at_ser: sample-rate mismatch");
  require(!speech.samples.empty(), "mix_at_ser: empty speech");

  const Waveform env_t = tile_to_length(env, speech.size());
  const double p_speech = speech.rms() * speech.rms();
  const double p_env = env_t.rms() * env_t.rms();
  require(p_speech > 0.0, "mix_at_ser: zero-power speech (SNR undefined)");
  require(p_env > 0.0, "mix_at_ser: zero-power env (SNR undefined)");

  const double snr_db = ser_to_snr_db(ser);
  const double gain = std::sqrt(p_speech / (p_env * std::pow(10.0, snr_db / 10.0)));

  MixResult res;
  res.env_gain = gain;
  res.wave.sample_rate = speech.sample_rate;
  res.wave.samples.resize(speech.size());
  double peak = 0.0;
  for (size_t i = 0; i < speech.size(); ++i) {
    res.wave.samples[i] = speech.samples[i] + gain * env_t.samples[i];
    peak = std::max(peak, std::abs(res.wave.samples[i]));
  }
  if (peak > 0.99) {
    res.norm_gain = 0.99 / peak;
    for (double& s : res.wave.samples) s *= res.norm_gain;
  }
  return res;
}

inline Waveform mix_at_ser(const Waveform& speech, const Waveform& env, const SerValue& ser) {
  return mix_at_ser_detail(speech, env, ser).wave;
}

// ---------------------------------------------------------------------------
// File I/O: mono WAV (PCM16 or float32, little-endian) and UMEL mel dumps.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u16(std::ostream& os, uint16_t v) {
  os.write(reinterpret_cast<const char*>(&v), 2);
}
inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint16_t read_u16(std::istream& is) {
  uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}

}  // namespace detail

inline void write_wav(const std::string& path, const Waveform& wave) {
  wave.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_wav: cannot open " + path);
  const uint32_t n = static_cast<uint32_t>(wave.samples.size());
  const uint32_t data_bytes = n * 2;
  os.write("RIFF", 4);
  detail::write_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::write_u32(os, 16);
  detail::write_u16(os, 1);  // PCM
  detail::write_u16(os, 1);  // mono
  detail::write_u32(os, static_cast<uint32_t>(wave.sample_rate));
  detail::write_u32(os, static_cast<uint32_t>(wave.sample_rate) * 2);
  detail::write_u16(os, 2);
  detail::write_u16(os, 16);
  os.write("data", 4);
  detail::write_u32(os, data_bytes);
  for (double s : wave.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const int16_t q = static_cast<int16_t>(std::lround(c * 32767.0));
    os.write(reinterpret_cast<const char*>(&q), 2);
  }
  if (!os) throw std::runtime_error("write_wav: write failed for " + path);
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_wav: cannot open " + path);
  char tag[5] = {0};
  is.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw std::runtime_error("read_wav: not a RIFF file");
  detail::read_u32(is);
  is.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw std::runtime_error("read_wav: not a WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  Waveform wave;
  bool got_fmt = false, got_data = false;
  while (is.read(tag, 4)) {
    const uint32_t chunk_size = detail::read_u32(is);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = detail::read_u16(is);
      channels = detail::read_u16(is);
      sample_rate = detail::read_u32(is);
      detail::read_u32(is);
      detail::read_u16(is);
      bits = detail::read_u16(is);
      if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
      got_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!got_fmt) throw std::runtime_error("read_wav: data chunk before fmt");
      if (channels != 1) throw std::runtime_error("read_wav: only mono supported");
      if (format == 1 && bits == 16) {
        const size_t n = chunk_size / 2;
        wave.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
          int16_t q;
          is.read(reinterpret_cast<char*>(&q), 2);
          wave.samples[i] = q / 32767.0;
        }
      } else if (format == 3 && bits == 32) {
        const size_t n = chunk_size / 4;
        wave.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
          float f;
          is.read(reinterpret_cast<char*>(&f), 4);
          wave.samples[i] = f;
        }
      } else {
        throw std::runtime_error("read_wav: unsupported format (need PCM16 or float32)");
      }
      got_data = true;
      break;
    } else {
      is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  if (!got_data) throw std::runtime_error("read_wav: missing data chunk");
  wave.sample_rate = static_cast<int>(sample_rate);
  wave.validate();
  return wave;
}

// UMEL dump: magic "UMEL", u32 F, u32 N, f32 row-major values.
inline void write_mel(const std::string& path, const MelSpectrogram& mel) {
  mel.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_mel: cannot open " + path);
  os.write("UMEL", 4);
  detail::write_u32(os, static_cast<uint32_t>(mel.F()));
  detail::write_u32(os, static_cast<uint32_t>(mel.N()));
  for (int r = 0; r < mel.F(); ++r)
    for (int c = 0; c < mel.N(); ++c) {
      const float v = static_cast<float>(mel.values(r, c));
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (!os) throw std::runtime_error("write_mel: write failed for " + path);
}

inline MelSpectrogram read_mel(const std::string& path, const MelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_mel: cannot open " + path);
  char magic[5] = {0};
  is.read(magic, 4);
  if (std::strncmp(magic, "UMEL", 4) != 0)
    throw std::runtime_error("read_mel: bad magic in " + path);
  const uint32_t F = detail::read_u32(is);
  const uint32_t N = detail::read_u32(is);
  MelSpectrogram mel;
  mel.config = cfg;
  mel.config.n_mels = static_cast<int>(F);
  mel.values.resize(F, N);
  for (uint32_t r = 0; r < F; ++r)
    for (uint32_t c = 0; c < N; ++c) {
      float v;
      is.read(reinterpret_cast<char*>(&v), 4);
      mel.values(r, c) = v;
    }
  if (!is) throw std::runtime_error("read_mel: truncated file " + path);
  return mel;
}

}  // namespace umbra
