#pragma once

#include <algorithm>
#include <complex>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "umbra/audio.hpp"
#include "umbra/flow.hpp"

namespace umbra {

inline double mel_mse(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mel_mse: shape mismatch");
  require(a.size() > 0, "mel_mse: empty input");
  return (a - b).array().square().mean();
}

inline double mel_mse(const Mat& a, const Mat& b, const std::vector<uint8_t>& mask) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mel_mse: shape mismatch");
  require(static_cast<int>(mask.size()) == a.cols(), "mel_mse: mask length mismatch");
  int count = 0;
  double sum = 0.0;
  for (int j = 0; j < a.cols(); ++j) {
    if (!mask[j]) continue;
    ++count;
    sum += (a.col(j) - b.col(j)).squaredNorm();
  }
  require(count > 0, "mel_mse: mask selects no frames");
  return sum / (double(count) * double(a.rows()));
}

// Out-of-band to in-band energy from the magnitude spectrogram; the band is
// where the synthetic voices live, everything else counts as environment.
inline double env_speech_energy_ratio(const Waveform& wave, const MelConfig& cfg,
                                      double band_lo_hz = 200.0,
                                      double band_hi_hz = 4200.0) {
  wave.validate();
  cfg.validate();
  require(band_lo_hz >= 0.0 && band_lo_hz < band_hi_hz, "env_speech_energy_ratio: bad band");
  const Eigen::MatrixXcd spec = stft(wave, cfg);
  double in_band = 0.0;
  double out_band = 0.0;
  for (int k = 0; k < spec.rows(); ++k) {
    const double f = double(k) * cfg.sample_rate / cfg.n_fft;
    const double e = spec.row(k).cwiseAbs2().sum();
    if (f >= band_lo_hz && f <= band_hi_hz)
      in_band += e;
    else
      out_band += e;
  }
  require(in_band + out_band > 1e-12, "env_speech_energy_ratio: silent input");
  require(in_band > 0.0, "env_speech_energy_ratio: no in-band energy");
  return out_band / in_band;
}

// Grayscale raster of a mel matrix, one pixel per bin and frame, lowest band
// on the bottom row, linear intensity over the value range. Binary PGM.
inline void plot_mel(const MelSpectrogram& mel, const std::string& path) {
  mel.validate();
  const int F = mel.F();
  const int N = mel.N();
  const double lo = mel.values.minCoeff();
  const double hi = mel.values.maxCoeff();
  const double range = hi - lo;

  std::ofstream out(path, std::ios::binary);
  require(bool(out), "plot_mel: cannot open " + path);
  out << "P5\n" << N << " " << F << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(N));
  for (int r = F - 1; r >= 0; --r) {
    for (int j = 0; j < N; ++j) {
      const double v = range < 1e-12 ? 0.0 : (mel.values(r, j) - lo) / range;
      row[size_t(j)] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
    out.write(reinterpret_cast<const char*>(row.data()), N);
  }
  require(bool(out), "plot_mel: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Transcript scoring: dominant-frequency decoding against the synthetic
// voice bank, then character error rate.
// ---------------------------------------------------------------------------

inline double dominant_frequency(const double* samples, size_t count, int sample_rate) {
  require(count >= 16, "dominant_frequency: segment too short");
  Dft dft(static_cast<int>(count));
  std::vector<std::complex<double>> spec(count / 2 + 1);
  dft.forward(samples, spec.data());
  size_t best = 1;
  for (size_t k = 2; k < spec.size(); ++k)
    if (std::abs(spec[k]) > std::abs(spec[best])) best = k;
  return double(best) * sample_rate / double(count);
}

// Splits the wave into one equal segment per expected character; quiet
// segments decode to spaces, the rest to the nearest voiced character.
inline std::string decode_transcript(const Waveform& wave, int n_chars) {
  wave.validate();
  require(n_chars >= 1, "decode_transcript: need at least one character");
  const size_t seg = wave.size() / size_t(n_chars);
  require(seg >= 16, "decode_transcript: segments too short to analyze");
  const double peak = wave.peak();

  std::string out;
  for (int i = 0; i < n_chars; ++i) {
    const double* begin = wave.samples.data() + size_t(i) * seg;
    double rms = 0.0;
    for (size_t j = 0; j < seg; ++j) rms += begin[j] * begin[j];
    rms = std::sqrt(rms / double(seg));
    if (peak <= 0.0 || rms < 0.05 * peak) {
      out.push_back(' ');
      continue;
    }
    const double f = dominant_frequency(begin, seg, wave.sample_rate);
    int idx = static_cast<int>(std::lround((f - 300.0) / 40.0));
    idx = std::max(0, std::min(25, idx));
    out.push_back(static_cast<char>('a' + idx));
  }
  return out;
}

inline int levenshtein(const std::string& a, const std::string& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline double char_error_rate(const std::string& reference, const std::string& hypothesis) {
  require(!reference.empty(), "char_error_rate: empty reference");
  return double(levenshtein(reference, hypothesis)) / double(reference.size());
}

// ---------------------------------------------------------------------------
// SER sweep: same seed, text, and prompts; only the rate knob moves.
// ---------------------------------------------------------------------------

struct SweepEntry {
  double ser = 0.0;
  double measured_ratio = 0.0;
  std::string mel_path;
  std::string wave_path;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  uint64_t seed = 0;
  std::string checkpoint_id;
};

inline SweepResult ser_sweep(const DenoiserParams& params, const DenoiserConfig& cfg,
                             const std::string& checkpoint_id,
                             const MelSpectrogram& ref_mel, const std::string& ref_text,
                             const MelSpectrogram& env_mel, const std::string& gen_text,
                             const std::vector<double>& ser_values, uint64_t seed,
                             const SamplerConfig& sampler, const MelConfig& mel_cfg,
                             const std::string& out_dir) {
  require(!ser_values.empty(), "ser_sweep: no rate values given");
  for (size_t i = 1; i < ser_values.size(); ++i)
    require(ser_values[i] > ser_values[i - 1],
            "ser_sweep: rate values must be strictly increasing");
  std::filesystem::create_directories(out_dir);

  SweepResult result;
  result.seed = seed;
  result.checkpoint_id = checkpoint_id;
  for (size_t i = 0; i < ser_values.size(); ++i) {
    const SynthesisResult synth = synthesize(params, cfg, ref_mel, ref_text, env_mel,
                                             gen_text, SerValue(ser_values[i]), sampler,
                                             mel_cfg, seed);
    SweepEntry entry;
    entry.ser = ser_values[i];
    const std::string stem =
        (std::filesystem::path(out_dir) / ("ser_" + std::to_string(i))).string();
    entry.wave_path = stem + ".wav";
    entry.mel_path = stem + ".umel";
    write_wav(entry.wave_path, synth.wave);
    write_mel(entry.mel_path, synth.mel);
    entry.measured_ratio = env_speech_energy_ratio(synth.wave, mel_cfg);
    result.entries.push_back(entry);
  }
  return result;
}

// One header block then one line per entry, tab-separated.
inline void write_sweep_report(const SweepResult& result, const std::string& path) {
  std::ofstream out(path);
  require(bool(out), "write_sweep_report: cannot open " + path);
  out.precision(17);
  out << "checkpoint\t" << result.checkpoint_id << "\n";
  out << "seed\t" << result.seed << "\n";
  for (const SweepEntry& e : result.entries)
    out << "ser\t" << e.ser << "\tratio\t" << e.measured_ratio << "\twav\t" << e.wave_path
        << "\tmel\t" << e.mel_path << "\n";
  require(bool(out), "write_sweep_report: write failed for " + path);
}

inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, "spearman_rho: need paired samples");
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < idx.size()) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double shared = 0.5 * double(i + j);  // ties share their mean rank
      for (size_t k = i; k <= j; ++k) r[idx[k]] = shared;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= double(ra.size());
  mb /= double(rb.size());
  double num = 0.0, da = 0.0, db = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  require(da > 0.0 && db > 0.0, "spearman_rho: constant input");
  return num / std::sqrt(da * db);
}

}  // namespace umbra
