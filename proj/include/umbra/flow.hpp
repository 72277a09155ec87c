#pragma once

#include <functional>
#include <string>
#include <vector>

#include "umbra/audio.hpp"
#include "umbra/common.hpp"
#include "umbra/denoiser.hpp"
#include "umbra/text.hpp"
#include "umbra/triplet.hpp"

namespace umbra {

// Contiguous span of frames to generate; everything else is context.
struct TemporalMask {
  int n = 0;
  int begin = 0;
  int end = 0;  // half-open

  void validate() const {
    require(n >= 1, "TemporalMask: empty sequence");
    require(0 <= begin && begin < end && end <= n, "TemporalMask: span out of range");
  }

  int count() const { return end - begin; }

  std::vector<uint8_t> flags() const {
    validate();
    std::vector<uint8_t> f(n, 0);
    for (int i = begin; i < end; ++i) f[i] = 1;
    return f;
  }
};

inline TemporalMask sample_mask(int n, Rng& rng, double min_frac = 0.3,
                                double max_frac = 1.0) {
  require(n >= 1, "sample_mask: need at least one frame");
  require(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0,
          "sample_mask: fractions must satisfy 0 < min <= max <= 1");
  int lo = static_cast<int>(std::ceil(min_frac * n));
  int hi = static_cast<int>(std::floor(max_frac * n));
  lo = std::max(1, lo);
  hi = std::max(lo, std::min(hi, n));
  const int len = lo + static_cast<int>(rng.uniform_int(size_t(hi - lo + 1)));
  const int begin = static_cast<int>(rng.uniform_int(size_t(n - len + 1)));
  TemporalMask m{n, begin, begin + len};
  m.validate();
  return m;
}

// Straight-line bridge between noise and data with constant velocity.
struct FlowPoint {
  Mat x_t;
  Mat u;
};

inline FlowPoint flow_point(const Mat& x0, const Mat& x1, double t) {
  require(x0.rows() == x1.rows() && x0.cols() == x1.cols(), "flow_point: shape mismatch");
  require(t >= 0.0 && t <= 1.0, "flow_point: t outside [0,1]");
  FlowPoint fp;
  fp.x_t = (1.0 - t) * x0 + t * x1;
  fp.u = x1 - x0;
  return fp;
}

inline Mat normalize_mel(const Mat& mel_values, const DenoiserConfig& cfg) {
  return (mel_values.array() - cfg.mel_mean).matrix() / cfg.mel_std;
}

inline Mat denormalize_mel(const Mat& x, const DenoiserConfig& cfg) {
  return (x.array() * cfg.mel_std + cfg.mel_mean).matrix();
}

inline Mat tile_columns(const Mat& m, int n) {
  require(m.cols() >= 1, "tile_columns: empty source");
  require(n >= 1, "tile_columns: target length must be positive");
  Mat out(m.rows(), n);
  for (int j = 0; j < n; ++j) out.col(j) = m.col(j % m.cols());
  return out;
}

// Draws one masked-infilling training example from a triplet: noise-to-data
// interpolant on the target mel, unmasked frames of the stems as context.
inline TrainingDraw make_training_draw(const TripletSample& triplet, const CharVocab& vocab,
                                       const DenoiserConfig& cfg, Rng& rng,
                                       double mask_min_frac = 0.3,
                                       double mask_max_frac = 1.0) {
  triplet.validate();
  const int n = triplet.target_mel.N();
  require(triplet.target_mel.F() == cfg.F, "make_training_draw: band count mismatch");
  require(n <= cfg.max_N, "make_training_draw: triplet longer than max_N");

  TrainingDraw d;
  d.t = rng.uniform();
  d.ser = triplet.ser.value;

  const TemporalMask mask = sample_mask(n, rng, mask_min_frac, mask_max_frac);
  d.mask = mask.flags();

  const Mat x1 = normalize_mel(triplet.target_mel.values, cfg);
  const Mat x0 = random_normal(cfg.F, n, rng);
  FlowPoint fp = flow_point(x0, x1, d.t);
  d.x_t = std::move(fp.x_t);
  d.u_target = std::move(fp.u);

  d.speech_ctx = normalize_mel(triplet.speech_mel.values, cfg);
  d.env_ctx = normalize_mel(tile_columns(triplet.env_mel.values, n), cfg);
  for (int j = 0; j < n; ++j)
    if (d.mask[j]) {
      d.speech_ctx.col(j).setZero();
      d.env_ctx.col(j).setZero();
    }

  d.tokens = extend_with_filler(tokenize(triplet.transcript, vocab), n, vocab);
  return d;
}

// Masked flow-matching objective for one draw.
inline double cfm_loss(const Mat& v, const Mat& u, const std::vector<uint8_t>& mask) {
  require(v.rows() == u.rows() && v.cols() == u.cols(), "cfm_loss: shape mismatch");
  require(static_cast<int>(mask.size()) == v.cols(), "cfm_loss: mask length mismatch");
  int count = 0;
  double sum = 0.0;
  for (int j = 0; j < v.cols(); ++j) {
    if (!mask[j]) continue;
    ++count;
    sum += (v.col(j) - u.col(j)).squaredNorm();
  }
  require(count > 0, "cfm_loss: mask selects no frames");
  return sum / (double(count) * double(v.rows()));
}

// ---------------------------------------------------------------------------
// ODE integration of the learned field
// ---------------------------------------------------------------------------

enum class SamplerMethod { EULER, MIDPOINT };

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::EULER;
  int n_steps = 32;

  void validate() const { require(n_steps >= 1, "SamplerConfig: need at least one step"); }
};

using VelocityFn = std::function<Mat(const Mat&, double)>;

inline Mat integrate(const VelocityFn& velocity, const Mat& x0, const SamplerConfig& cfg) {
  cfg.validate();
  require(all_finite(x0), "integrate: non-finite start state");
  const double h = 1.0 / cfg.n_steps;
  Mat x = x0;
  for (int s = 0; s < cfg.n_steps; ++s) {
    const double t = double(s) * h;
    Mat v = velocity(x, t);
    require(v.rows() == x.rows() && v.cols() == x.cols(), "integrate: field shape mismatch");
    if (cfg.method == SamplerMethod::MIDPOINT) {
      const Mat x_mid = x + (h / 2.0) * v;
      v = velocity(x_mid, t + h / 2.0);
      require(v.rows() == x.rows() && v.cols() == x.cols(),
              "integrate: field shape mismatch");
    }
    x += h * v;
    if (!all_finite(x)) throw std::runtime_error("integrate: state diverged at step " +
                                                 std::to_string(s + 1));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Inference: infill new frames after a reference, then invert to a waveform
// ---------------------------------------------------------------------------

struct SynthesisResult {
  MelSpectrogram mel;
  Waveform wave;
};

inline SynthesisResult synthesize(const DenoiserParams& params, const DenoiserConfig& cfg,
                                  const MelSpectrogram& ref_speech_mel,
                                  const std::string& ref_transcript,
                                  const MelSpectrogram& env_prompt_mel,
                                  const std::string& gen_text, const SerValue& ser,
                                  const SamplerConfig& sampler, const MelConfig& mel_cfg,
                                  uint64_t seed, const CharVocab& vocab = default_vocab()) {
  ref_speech_mel.validate();
  env_prompt_mel.validate();
  require(ref_speech_mel.F() == cfg.F && env_prompt_mel.F() == cfg.F,
          "synthesize: band count mismatch");

  const int n_ref = ref_speech_mel.N();
  const int n_gen = estimate_target_length(gen_text, ref_transcript, n_ref);
  const int n_total = n_ref + n_gen;
  require(n_total <= cfg.max_N,
          "synthesize: requested " + std::to_string(n_total) + " frames, limit is " +
              std::to_string(cfg.max_N));

  Mat speech_ctx = Mat::Zero(cfg.F, n_total);
  speech_ctx.leftCols(n_ref) = normalize_mel(ref_speech_mel.values, cfg);
  const Mat env_ctx = normalize_mel(tile_columns(env_prompt_mel.values, n_total), cfg);

  const std::vector<int> ids = tokenize(ref_transcript + gen_text, vocab);
  const ExtendedTokens tokens = extend_with_filler(ids, n_total, vocab);
  const Mat text_feat = embed_text(tokens, params.text);

  Rng rng(derive_seed(seed, 0x5f10));
  const Mat x0 = random_normal(cfg.F, n_total, rng);

  const VelocityFn field = [&](const Mat& x, double t) {
    const Mat cond = cond_vector(t, ser, params, cfg);
    return denoise_forward(x, speech_ctx, env_ctx, text_feat, cond, params, cfg);
  };
  const Mat x1 = integrate(field, x0, sampler);

  SynthesisResult out;
  out.mel.config = mel_cfg;
  out.mel.config.n_mels = cfg.F;
  out.mel.values = denormalize_mel(x1.rightCols(n_gen), cfg);
  out.wave = griffin_lim(out.mel, out.mel.config, 60, seed);
  return out;
}

}  // namespace umbra
