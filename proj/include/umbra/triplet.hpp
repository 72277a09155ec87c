#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "umbra/audio.hpp"
#include "umbra/common.hpp"

namespace umbra {

struct VadLabels {
  std::vector<uint8_t> speech;  // per analysis frame, 1 = speech

  int size() const { return static_cast<int>(speech.size()); }
  int count_speech() const {
    return static_cast<int>(std::count(speech.begin(), speech.end(), uint8_t{1}));
  }
  int count_nonspeech() const { return size() - count_speech(); }
};

namespace detail {

// Frame f owns samples [f*hop, (f+1)*hop); the last frame extends to the end.
inline std::pair<size_t, size_t> frame_span(int f, int n_frames, int hop, size_t len) {
  const size_t start = static_cast<size_t>(f) * hop;
  const size_t end = (f == n_frames - 1) ? len : start + hop;
  return {start, std::min(end, len)};
}

inline std::vector<double> frame_rms(const Waveform& wave, const MelConfig& cfg) {
  const int n = cfg.frame_count(wave.size());
  std::vector<double> rms(n);
  for (int f = 0; f < n; ++f) {
    const auto [a, b] = frame_span(f, n, cfg.hop, wave.size());
    double acc = 0.0;
    for (size_t i = a; i < b; ++i) acc += wave.samples[i] * wave.samples[i];
    rms[f] = std::sqrt(acc / std::max<size_t>(1, b - a));
  }
  return rms;
}

}  // namespace detail

// Energy gate relative to the signal's own noise floor (5th percentile of
// frame level). Signals without usable dynamic range (all frames within
// threshold_db of each other) degenerate to a nonzero-energy gate so that
// silence stays all-false and a constant tone stays all-true. Isolated
// single-frame runs are absorbed into their surroundings.
inline VadLabels energy_vad(const Waveform& wave, const MelConfig& cfg,
                            double threshold_db = 10.0) {
  cfg.validate();
  wave.validate();
  require(wave.size() >= static_cast<size_t>(cfg.n_fft), "energy_vad: wave shorter than n_fft");

  const std::vector<double> rms = detail::frame_rms(wave, cfg);
  const int n = static_cast<int>(rms.size());
  std::vector<double> db(n);
  for (int f = 0; f < n; ++f)
    db[f] = rms[f] > 0.0 ? std::max(-300.0, 20.0 * std::log10(rms[f])) : -300.0;

  std::vector<double> sorted = db;
  std::sort(sorted.begin(), sorted.end());
  const double p5 = sorted[static_cast<size_t>(n - 1) * 5 / 100];
  const double peak = sorted.back();

  VadLabels labels;
  labels.speech.resize(n);
  if (peak - p5 < threshold_db) {
    for (int f = 0; f < n; ++f) labels.speech[f] = rms[f] > 0.0 ? 1 : 0;
  } else {
    for (int f = 0; f < n; ++f) labels.speech[f] = db[f] > p5 + threshold_db ? 1 : 0;
  }

  // absorb isolated flips shorter than 2 frames
  for (int f = 1; f + 1 < n; ++f)
    if (labels.speech[f] != labels.speech[f - 1] && labels.speech[f] != labels.speech[f + 1])
      labels.speech[f] = labels.speech[f - 1];
  return labels;
}

// Sample ranges of frames matching `speech_value`, merged across adjacent frames.
inline std::vector<std::pair<size_t, size_t>> vad_regions(const VadLabels& labels,
                                                          const MelConfig& cfg, size_t len,
                                                          bool speech_value) {
  std::vector<std::pair<size_t, size_t>> regions;
  const int n = labels.size();
  for (int f = 0; f < n; ++f) {
    if ((labels.speech[f] != 0) != speech_value) continue;
    const auto [a, b] = detail::frame_span(f, n, cfg.hop, len);
    if (!regions.empty() && regions.back().second == a)
      regions.back().second = b;
    else
      regions.emplace_back(a, b);
  }
  return regions;
}

// Concatenates all non-speech regions in temporal order.
inline Waveform env_from_vad(const Waveform& wave, const VadLabels& labels,
                             const MelConfig& cfg) {
  require(labels.size() == cfg.frame_count(wave.size()), "env_from_vad: label count mismatch");
  require(labels.count_nonspeech() >= 1, "env_from_vad: no non-speech frames");
  Waveform env;
  env.sample_rate = wave.sample_rate;
  for (const auto& [a, b] : vad_regions(labels, cfg, wave.size(), false))
    env.samples.insert(env.samples.end(), wave.samples.begin() + a, wave.samples.begin() + b);
  return env;
}

// When a recording has no non-speech frames, relabel its quietest sliver so the
// separation path still has a noise-profile source.
inline VadLabels force_min_nonspeech(const Waveform& wave, const MelConfig& cfg,
                                     const VadLabels& labels) {
  if (labels.count_nonspeech() >= 1) return labels;
  const std::vector<double> rms = detail::frame_rms(wave, cfg);
  const int n = static_cast<int>(rms.size());
  const int want = std::max(1, n / 20);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rms[a] < rms[b]; });
  VadLabels out = labels;
  for (int i = 0; i < want; ++i) out.speech[order[i]] = 0;
  return out;
}

// Spectral gating: the median magnitude spectrum over non-speech frames forms a
// noise profile; up to gate_margin times the profile is attributed to the
// environment in every frame, the remainder to speech. Shared phases, so the
// two parts sum back to the input spectrum exactly.
inline std::pair<Waveform, Waveform> spectral_separate(const Waveform& wave,
                                                       const VadLabels& labels,
                                                       const MelConfig& cfg,
                                                       double gate_margin = 2.5) {
  require(labels.size() == cfg.frame_count(wave.size()),
          "spectral_separate: label count mismatch");
  require(labels.count_nonspeech() >= 1, "spectral_separate: no non-speech frames");

  const Eigen::MatrixXcd spec = stft(wave, cfg);
  const int n_bins = static_cast<int>(spec.rows());
  const int n_frames = static_cast<int>(spec.cols());

  Vec profile(n_bins);
  std::vector<double> tmp;
  tmp.reserve(labels.count_nonspeech());
  for (int k = 0; k < n_bins; ++k) {
    tmp.clear();
    for (int f = 0; f < n_frames; ++f)
      if (!labels.speech[f]) tmp.push_back(std::abs(spec(k, f)));
    std::sort(tmp.begin(), tmp.end());
    const size_t m = tmp.size();
    profile(k) = (m % 2 == 1) ? tmp[m / 2] : 0.5 * (tmp[m / 2 - 1] + tmp[m / 2]);
  }

  Eigen::MatrixXcd env_spec(n_bins, n_frames), speech_spec(n_bins, n_frames);
  for (int f = 0; f < n_frames; ++f)
    for (int k = 0; k < n_bins; ++k) {
      const std::complex<double> v = spec(k, f);
      const double mag = std::abs(v);
      const double env_mag = std::min(mag, gate_margin * profile(k));
      const std::complex<double> unit = mag > 1e-300 ? v / mag : std::complex<double>(1.0, 0.0);
      env_spec(k, f) = unit * env_mag;
      speech_spec(k, f) = unit * (mag - env_mag);
    }

  auto resize_to_input = [&](Waveform w) {
    w.samples.resize(wave.size(), 0.0);
    return w;
  };
  return {resize_to_input(istft(speech_spec, cfg)), resize_to_input(istft(env_spec, cfg))};
}

// ---------------------------------------------------------------------------
// Triplet construction
// ---------------------------------------------------------------------------

enum class Strategy { VAD, SEPARATION, SYNTHETIC };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::VAD: return "VAD";
    case Strategy::SEPARATION: return "SEPARATION";
    case Strategy::SYNTHETIC: return "SYNTHETIC";
  }
  throw std::invalid_argument("to_string: bad strategy");
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "VAD") return Strategy::VAD;
  if (s == "SEPARATION") return Strategy::SEPARATION;
  if (s == "SYNTHETIC") return Strategy::SYNTHETIC;
  throw std::runtime_error("strategy_from_string: unknown strategy " + s);
}

struct TripletSample {
  MelSpectrogram target_mel;  // the full mixture
  MelSpectrogram speech_mel;  // speech-only stem
  MelSpectrogram env_mel;     // environment-only stem
  std::string transcript;
  SerValue ser;
  Strategy strategy = Strategy::SYNTHETIC;

  void validate() const {
    target_mel.validate();
    speech_mel.validate();
    env_mel.validate();
    require(target_mel.F() == speech_mel.F() && target_mel.F() == env_mel.F(),
            "TripletSample: mel band count mismatch");
    require(target_mel.N() == speech_mel.N(), "TripletSample: target/speech length mismatch");
    require(!transcript.empty(), "TripletSample: empty transcript");
  }
};

namespace detail {

inline Waveform at_least_one_window(const Waveform& w, int n_fft) {
  return w.size() >= static_cast<size_t>(n_fft) ? w
                                                : tile_to_length(w, static_cast<size_t>(n_fft));
}

}  // namespace detail

// Splits a mixed recording into a triplet via one of two randomly chosen
// strategies: silence harvesting (speech kept in place, the concatenated quiet
// regions become the environment) or spectral gating. The SER is estimated
// from the measured stem powers.
inline TripletSample forge_triplet(const Waveform& wave, const std::string& transcript,
                                   Rng& rng, const MelConfig& cfg,
                                   double threshold_db = 10.0) {
  require(!transcript.empty(), "forge_triplet: empty transcript");
  const VadLabels labels = energy_vad(wave, cfg, threshold_db);
  const bool pick_vad = rng.bernoulli(0.5);

  TripletSample out;
  out.transcript = transcript;
  out.target_mel = stft_mel(wave, cfg);

  double p_speech = 0.0, p_env = 0.0;
  if (pick_vad && labels.count_nonspeech() >= 1 && labels.count_speech() >= 1) {
    out.strategy = Strategy::VAD;
    Waveform speech = wave;
    size_t n_speech_samples = 0;
    for (const auto& [a, b] : vad_regions(labels, cfg, wave.size(), false))
      std::fill(speech.samples.begin() + a, speech.samples.begin() + b, 0.0);
    for (const auto& [a, b] : vad_regions(labels, cfg, wave.size(), true))
      n_speech_samples += b - a;
    const Waveform env = env_from_vad(wave, labels, cfg);

    double acc = 0.0;
    for (double s : speech.samples) acc += s * s;
    p_speech = n_speech_samples > 0 ? acc / n_speech_samples : 0.0;
    p_env = env.rms() * env.rms();

    out.speech_mel = stft_mel(speech, cfg);
    out.env_mel = stft_mel(detail::at_least_one_window(env, cfg.n_fft), cfg);
  } else {
    out.strategy = Strategy::SEPARATION;
    const VadLabels usable = force_min_nonspeech(wave, cfg, labels);
    const auto [speech, env] = spectral_separate(wave, usable, cfg);
    p_speech = speech.rms() * speech.rms();
    p_env = env.rms() * env.rms();
    out.speech_mel = stft_mel(speech, cfg);
    out.env_mel = stft_mel(env, cfg);
  }

  if (p_env <= 0.0)
    out.ser = SerValue(1.0);
  else if (p_speech <= 0.0)
    out.ser = SerValue(0.0);
  else
    out.ser = snr_to_ser(10.0 * std::log10(p_speech / p_env));
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus with ground-truth stems
// ---------------------------------------------------------------------------

inline double char_base_freq(char c) {
  require(c >= 'a' && c <= 'z', "char_base_freq: expected a-z");
  return 300.0 + 40.0 * (c - 'a');
}

struct SynthSample {
  Waveform speech;
  Waveform env;
  std::string transcript;
  int env_class = 0;  // 0 filtered noise, 1 amplitude-modulated noise, 2 tone pad
  std::vector<std::pair<size_t, size_t>> char_spans;  // sample range per character
};

namespace detail {

inline void bandpass_inplace(Waveform& w, double lo_hz, double hi_hz) {
  const size_t n = w.size();
  std::vector<std::complex<double>> spec(n / 2 + 1);
  Dft dft(static_cast<int>(n));
  dft.forward(w.samples.data(), spec.data());
  for (size_t k = 0; k < spec.size(); ++k) {
    const double f = static_cast<double>(k) * w.sample_rate / n;
    if (f < lo_hz || f > hi_hz) spec[k] = 0.0;
  }
  dft.inverse(spec.data(), w.samples.data());
}

}  // namespace detail

// Speech proxy: one 80-160 ms segment per character, built from 3 harmonics of
// a per-character base frequency with raised-cosine edges; spaces are silent.
// Environment: high-band (4.8-7.6 kHz) noise or tones, spectrally disjoint
// from the speech band, 60-100% of the speech duration, peak 0.5.
inline SynthSample synth_sample(Rng& rng, const MelConfig& cfg) {
  cfg.validate();
  SynthSample out;
  const int sr = cfg.sample_rate;
  out.speech.sample_rate = sr;
  out.env.sample_rate = sr;

  const int len = 4 + static_cast<int>(rng.uniform_int(7));  // 4..10 chars
  std::string text(len, '?');
  for (char& c : text) c = static_cast<char>('a' + rng.uniform_int(26));
  if (len >= 6) {
    const int pos = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(len - 2)));
    text[pos] = ' ';
  }
  out.transcript = text;

  const int ramp = sr / 100;  // 10 ms
  for (char c : text) {
    const int dur = static_cast<int>(rng.uniform(0.080, 0.160) * sr);
    const size_t base = out.speech.samples.size();
    out.char_spans.emplace_back(base, base + dur);
    out.speech.samples.resize(base + dur, 0.0);
    if (c == ' ') continue;
    const double f0 = char_base_freq(c);
    for (int i = 0; i < dur; ++i) {
      double s = 0.0;
      double amp = 1.0, mult = 1.0;
      for (int h = 0; h < 3; ++h) {
        const double fh = f0 * mult;
        if (fh < 3900.0) s += amp * std::sin(2.0 * kPi * fh * i / sr);
        amp *= 0.5;
        mult += 1.0;
      }
      double envl = 1.0;
      if (i < ramp) envl = 0.5 - 0.5 * std::cos(kPi * i / ramp);
      if (dur - 1 - i < ramp) envl = std::min(envl, 0.5 - 0.5 * std::cos(kPi * (dur - 1 - i) / ramp));
      out.speech.samples[base + i] = 0.25 * envl * s;
    }
  }

  const size_t env_len =
      std::max<size_t>(static_cast<size_t>(cfg.n_fft),
                       static_cast<size_t>(rng.uniform(0.6, 1.0) * out.speech.size()));
  out.env.samples.resize(env_len);
  out.env_class = static_cast<int>(rng.uniform_int(3));
  if (out.env_class == 0) {
    const double wobble_hz = rng.uniform(0.3, 1.0);
    for (size_t i = 0; i < env_len; ++i) out.env.samples[i] = rng.normal();
    detail::bandpass_inplace(out.env, 4800.0, 7600.0);
    for (size_t i = 0; i < env_len; ++i)
      out.env.samples[i] *= 1.0 - 0.5 * 0.5 * (1.0 + std::sin(2.0 * kPi * wobble_hz * i / sr));
  } else if (out.env_class == 1) {
    const double am_hz = rng.uniform(2.0, 5.0);
    for (size_t i = 0; i < env_len; ++i) out.env.samples[i] = rng.normal();
    detail::bandpass_inplace(out.env, 4800.0, 7600.0);
    for (size_t i = 0; i < env_len; ++i)
      out.env.samples[i] *= 0.55 + 0.45 * std::sin(2.0 * kPi * am_hz * i / sr);
  } else {
    const double vib_hz = rng.uniform(0.3, 0.8);
    double phase[3] = {0.0, 0.0, 0.0};
    const double base[3] = {5200.0, 6100.0, 7000.0};
    for (size_t i = 0; i < env_len; ++i) {
      const double vib = 10.0 * std::sin(2.0 * kPi * vib_hz * i / sr);
      double s = 0.0;
      for (int t = 0; t < 3; ++t) {
        phase[t] += 2.0 * kPi * (base[t] + vib) / sr;
        s += std::sin(phase[t]) / 3.0;
      }
      out.env.samples[i] = s;
    }
  }
  const double peak = out.env.peak();
  if (peak > 0.0)
    for (double& s : out.env.samples) s *= 0.5 / peak;
  return out;
}

// Mixes a synthetic sample at a requested ser and returns the triplet plus the
// exact stems as they appear in the mixture.
struct SyntheticForge {
  TripletSample triplet;
  Waveform mix;
  Waveform speech_stem;
  Waveform env_stem;
};

inline SyntheticForge make_synthetic_triplet(Rng& rng, const MelConfig& cfg) {
  const SynthSample s = synth_sample(rng, cfg);
  const SerValue ser(rng.uniform());
  const MixResult mixed = mix_at_ser_detail(s.speech, s.env, ser);

  SyntheticForge out;
  out.mix = mixed.wave;
  out.speech_stem = s.speech;
  for (double& v : out.speech_stem.samples) v *= mixed.norm_gain;
  out.env_stem = tile_to_length(s.env, s.speech.size());
  for (double& v : out.env_stem.samples) v *= mixed.env_gain * mixed.norm_gain;

  out.triplet.target_mel = stft_mel(out.mix, cfg);
  out.triplet.speech_mel = stft_mel(out.speech_stem, cfg);
  out.triplet.env_mel = stft_mel(out.env_stem, cfg);
  out.triplet.transcript = s.transcript;
  out.triplet.ser = ser;
  out.triplet.strategy = Strategy::SYNTHETIC;
  out.triplet.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: one structured record per line; paths relative to the manifest.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string target_mel;
  std::string speech_mel;
  std::string env_mel;
  std::string wav;  // optional
  std::string transcript;
  double ser = 1.0;
  std::string strategy;
};

struct Manifest {
  std::vector<ManifestRecord> records;
};

inline void write_manifest(const Manifest& manifest, const std::string& path) {
  std::set<std::string> ids;
  for (const auto& r : manifest.records)
    require(ids.insert(r.id).second, "write_manifest: duplicate id " + r.id);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
  for (const auto& r : manifest.records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["target_mel"] = r.target_mel;
    j["speech_mel"] = r.speech_mel;
    j["env_mel"] = r.env_mel;
    if (!r.wav.empty()) j["wav"] = r.wav;
    j["transcript"] = r.transcript;
    j["ser"] = r.ser;
    j["strategy"] = r.strategy;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_manifest: write failed for " + path);
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  Manifest manifest;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_manifest: malformed record at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    ManifestRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.target_mel = j.at("target_mel").get<std::string>();
      r.speech_mel = j.at("speech_mel").get<std::string>();
      r.env_mel = j.at("env_mel").get<std::string>();
      r.wav = j.value("wav", "");
      r.transcript = j.at("transcript").get<std::string>();
      r.ser = j.at("ser").get<double>();
      r.strategy = j.at("strategy").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_manifest: missing field at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    strategy_from_string(r.strategy);  // validates
    SerValue{r.ser};                   // validates
    if (!ids.insert(r.id).second)
      throw std::runtime_error("read_manifest: duplicate id " + r.id);
    for (const std::string& rel : {r.target_mel, r.speech_mel, r.env_mel, r.wav}) {
      if (rel.empty()) continue;
      if (!std::filesystem::exists(base / rel))
        throw std::runtime_error("read_manifest: record " + r.id + " references missing file " +
                                 rel);
    }
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

inline TripletSample load_triplet(const ManifestRecord& r, const std::string& manifest_path,
                                  const MelConfig& cfg) {
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  TripletSample t;
  t.target_mel = read_mel((base / r.target_mel).string(), cfg);
  t.speech_mel = read_mel((base / r.speech_mel).string(), cfg);
  t.env_mel = read_mel((base / r.env_mel).string(), cfg);
  t.transcript = r.transcript;
  t.ser = SerValue(r.ser);
  t.strategy = strategy_from_string(r.strategy);
  t.validate();
  return t;
}

}  // namespace umbra
