#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "umbra/audio.hpp"
#include "umbra/common.hpp"
#include "umbra/text.hpp"

namespace umbra {

struct DenoiserConfig {
  int d = 128;       // model width
  int n_blocks = 4;
  int n_heads = 4;
  int d_text = 64;
  int F = 40;        // mel bins
  int max_N = 512;   // longest frame sequence
  int ser_embed_dim = 64;
  int time_embed_dim = 64;
  bool use_pos_enc = true;
  // fixed affine normalization applied to log-mels before they enter the flow
  double mel_mean = -5.0;
  double mel_std = 4.0;

  void validate() const {
    require(d > 0 && n_blocks >= 0 && n_heads > 0 && d_text > 0 && F > 0 && max_N > 0,
            "DenoiserConfig: dimensions must be positive");
    require(d % n_heads == 0, "DenoiserConfig: d must divide evenly into heads");
    require(ser_embed_dim > 0 && ser_embed_dim % 2 == 0, "DenoiserConfig: ser_embed_dim even");
    require(time_embed_dim > 0 && time_embed_dim % 2 == 0,
            "DenoiserConfig: time_embed_dim even");
    require(mel_std > 0.0, "DenoiserConfig: mel_std must be positive");
  }

  int head_dim() const { return d / n_heads; }
  int feature_dim() const { return 3 * F + d_text; }
};

// Interleaved sin/cos over geometrically spaced frequencies (base 10000);
// the input is scaled by 1000 so unit-interval values span many periods.
inline Vec sinusoidal_embed(double value, int dim) {
  require(dim > 0 && dim % 2 == 0, "sinusoidal_embed: dim must be positive and even");
  const int half = dim / 2;
  const double scaled = value * 1000.0;
  Vec e(dim);
  for (int i = 0; i < half; ++i) {
    const double omega =
        half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
    e(2 * i) = std::sin(scaled * omega);
    e(2 * i + 1) = std::cos(scaled * omega);
  }
  return e;
}

// d x N table of frame position codes
inline Mat frame_positional_encoding(int d, int n) {
  Mat pe(d, n);
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < d; i += 2) {
      const double omega = std::exp(-std::log(10000.0) * i / d);
      pe(i, pos) = std::sin(pos * omega);
      if (i + 1 < d) pe(i + 1, pos) = std::cos(pos * omega);
    }
  return pe;
}

struct DitBlockParams {
  Mat wq, bq, wk, bk, wv, bv;  // d x d, d x 1
  Mat wo, bo;                  // d x d, d x 1
  Mat wf1, bf1;                // 4d x d, 4d x 1
  Mat wf2, bf2;                // d x 4d, d x 1
  Mat mod_w, mod_b;            // 6d x d, 6d x 1 (zero at init)
};

struct DenoiserParams {
  TextEmbedderParams text;
  Mat in_w, in_b;    // d x (3F + d_text), d x 1
  std::vector<DitBlockParams> blocks;
  Mat out_w, out_b;  // F x d, F x 1
  Mat t_w1, t_b1, t_w2, t_b2;  // time MLP: d x time_dim, d x 1, d x d, d x 1
  Mat s_w1, s_b1, s_w2, s_b2;  // ser MLP
};

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, uint64_t seed,
                                    int text_vocab_size) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0xd17));
  DenoiserParams p;
  p.text = init_text_embedder(text_vocab_size, cfg.d_text, 2, rng);

  const int d = cfg.d;
  const double in_scale = 1.0 / std::sqrt(double(cfg.feature_dim()));
  const double d_scale = 1.0 / std::sqrt(double(d));
  p.in_w = random_normal(d, cfg.feature_dim(), rng, in_scale);
  p.in_b = Mat::Zero(d, 1);
  p.blocks.resize(cfg.n_blocks);
  for (auto& b : p.blocks) {
    b.wq = random_normal(d, d, rng, d_scale);
    b.bq = Mat::Zero(d, 1);
    b.wk = random_normal(d, d, rng, d_scale);
    b.bk = Mat::Zero(d, 1);
    b.wv = random_normal(d, d, rng, d_scale);
    b.bv = Mat::Zero(d, 1);
    b.wo = random_normal(d, d, rng, d_scale);
    b.bo = Mat::Zero(d, 1);
    b.wf1 = random_normal(4 * d, d, rng, d_scale);
    b.bf1 = Mat::Zero(4 * d, 1);
    b.wf2 = random_normal(d, 4 * d, rng, 1.0 / std::sqrt(4.0 * d));
    b.bf2 = Mat::Zero(d, 1);
    b.mod_w = Mat::Zero(6 * d, d);
    b.mod_b = Mat::Zero(6 * d, 1);
  }
  p.out_w = random_normal(cfg.F, d, rng, d_scale);
  p.out_b = Mat::Zero(cfg.F, 1);
  p.t_w1 = random_normal(d, cfg.time_embed_dim, rng, 1.0 / std::sqrt(double(cfg.time_embed_dim)));
  p.t_b1 = Mat::Zero(d, 1);
  p.t_w2 = random_normal(d, d, rng, d_scale);
  p.t_b2 = Mat::Zero(d, 1);
  p.s_w1 = random_normal(d, cfg.ser_embed_dim, rng, 1.0 / std::sqrt(double(cfg.ser_embed_dim)));
  p.s_b1 = Mat::Zero(d, 1);
  p.s_w2 = random_normal(d, d, rng, d_scale);
  p.s_b2 = Mat::Zero(d, 1);
  return p;
}

inline std::vector<std::pair<std::string, Mat*>> tensor_refs(DenoiserParams& p) {
  std::vector<std::pair<std::string, Mat*>> refs = text_tensor_refs(p.text, "text.");
  refs.emplace_back("in_proj.w", &p.in_w);
  refs.emplace_back("in_proj.b", &p.in_b);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string bp = "block" + std::to_string(i) + ".";
    DitBlockParams& b = p.blocks[i];
    refs.emplace_back(bp + "attn.wq", &b.wq);
    refs.emplace_back(bp + "attn.bq", &b.bq);
    refs.emplace_back(bp + "attn.wk", &b.wk);
    refs.emplace_back(bp + "attn.bk", &b.bk);
    refs.emplace_back(bp + "attn.wv", &b.wv);
    refs.emplace_back(bp + "attn.bv", &b.bv);
    refs.emplace_back(bp + "attn.wo", &b.wo);
    refs.emplace_back(bp + "attn.bo", &b.bo);
    refs.emplace_back(bp + "ffn.w1", &b.wf1);
    refs.emplace_back(bp + "ffn.b1", &b.bf1);
    refs.emplace_back(bp + "ffn.w2", &b.wf2);
    refs.emplace_back(bp + "ffn.b2", &b.bf2);
    refs.emplace_back(bp + "mod.w", &b.mod_w);
    refs.emplace_back(bp + "mod.b", &b.mod_b);
  }
  refs.emplace_back("out_proj.w", &p.out_w);
  refs.emplace_back("out_proj.b", &p.out_b);
  refs.emplace_back("time_mlp.w1", &p.t_w1);
  refs.emplace_back("time_mlp.b1", &p.t_b1);
  refs.emplace_back("time_mlp.w2", &p.t_w2);
  refs.emplace_back("time_mlp.b2", &p.t_b2);
  refs.emplace_back("ser_mlp.w1", &p.s_w1);
  refs.emplace_back("ser_mlp.b1", &p.s_b1);
  refs.emplace_back("ser_mlp.w2", &p.s_w2);
  refs.emplace_back("ser_mlp.b2", &p.s_b2);
  return refs;
}

inline DenoiserParams zero_like(const DenoiserParams& p) {
  DenoiserParams g = p;
  for (auto& [name, t] : tensor_refs(g)) t->setZero();
  return g;
}

inline void quantize_params(DenoiserParams& p) {
  for (auto& [name, t] : tensor_refs(p)) quantize_f32(*t);
}

// ---------------------------------------------------------------------------
// Conditioning: c = TimeEmbed(t) + SEREmbed(ser), each a sinusoidal code
// through a two-layer MLP with SiLU.
// ---------------------------------------------------------------------------

namespace nn {

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad_scalar(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

inline Mat silu(const Mat& x) { return x.unaryExpr([](double v) { return silu_scalar(v); }); }

inline Mat silu_backward(const Mat& x, const Mat& g) {
  return g.cwiseProduct(x.unaryExpr([](double v) { return silu_grad_scalar(v); }));
}

}  // namespace nn

struct CondCache {
  Vec e_t, e_s;      // sinusoidal codes
  Mat a_t, a_s;      // first-layer pre-activations (d x 1)
  Mat c;             // d x 1
};

inline Mat cond_vector(double t, const SerValue& ser, const DenoiserParams& p,
                       const DenoiserConfig& cfg, CondCache* cache = nullptr) {
  require(t >= 0.0 && t <= 1.0, "cond_vector: t outside [0,1]");
  CondCache local;
  CondCache& c = cache ? *cache : local;
  c.e_t = sinusoidal_embed(t, cfg.time_embed_dim);
  c.e_s = sinusoidal_embed(ser.value, cfg.ser_embed_dim);
  c.a_t = p.t_w1 * c.e_t + p.t_b1;
  c.a_s = p.s_w1 * c.e_s + p.s_b1;
  const Mat h_t = nn::silu(c.a_t);
  const Mat h_s = nn::silu(c.a_s);
  c.c = p.t_w2 * h_t + p.t_b2 + p.s_w2 * h_s + p.s_b2;
  return c.c;
}

inline void cond_vector_backward(const DenoiserParams& p, const CondCache& cache,
                                 const Mat& dc, DenoiserParams& grads) {
  const Mat h_t = nn::silu(cache.a_t);
  const Mat h_s = nn::silu(cache.a_s);
  grads.t_w2 += dc * h_t.transpose();
  grads.t_b2 += dc;
  grads.s_w2 += dc * h_s.transpose();
  grads.s_b2 += dc;
  const Mat da_t = nn::silu_backward(cache.a_t, p.t_w2.transpose() * dc);
  const Mat da_s = nn::silu_backward(cache.a_s, p.s_w2.transpose() * dc);
  grads.t_w1 += da_t * cache.e_t.transpose();
  grads.t_b1 += da_t;
  grads.s_w1 += da_s * cache.e_s.transpose();
  grads.s_b1 += da_s;
}

// ---------------------------------------------------------------------------
// DiT forward/backward
// ---------------------------------------------------------------------------

namespace nn {

// layer norm without affine, per column
inline Mat layer_norm_plain(const Mat& x, Mat& x_hat, Vec& istd) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  x_hat.resize(C, N);
  istd.resize(N);
  for (int j = 0; j < N; ++j) {
    const double mu = x.col(j).mean();
    const double var = (x.col(j).array() - mu).square().mean();
    istd(j) = 1.0 / std::sqrt(var + kLnEps);
    x_hat.col(j) = (x.col(j).array() - mu).matrix() * istd(j);
  }
  return x_hat;
}

inline Mat layer_norm_plain_backward(const Mat& x_hat, const Vec& istd, const Mat& g) {
  const int N = static_cast<int>(x_hat.cols());
  Mat dx(x_hat.rows(), N);
  for (int j = 0; j < N; ++j) {
    const double mean_g = g.col(j).mean();
    const double mean_g_xhat = (g.col(j).array() * x_hat.col(j).array()).mean();
    dx.col(j) =
        istd(j) * (g.col(j).array() - mean_g - x_hat.col(j).array() * mean_g_xhat).matrix();
  }
  return dx;
}

}  // namespace nn

struct BlockCache {
  Mat h_in;
  Mat ln1_hat;
  Vec ln1_istd;
  Mat xm1;             // modulated ln output feeding attention
  Mat q, k, v;         // d x N
  std::vector<Mat> attn_p;  // per head, N x N row-softmax
  Mat attn_o;          // d x N concatenated head outputs
  Mat attn_y;          // after output projection
  Mat h_mid;
  Mat ln2_hat;
  Vec ln2_istd;
  Mat xm2;
  Mat ff_a;            // first linear pre-activation
  Mat ff_g;            // gelu(ff_a)
  Mat ff_out;
  Mat cond_in;         // conditioning vector as given to the block
  Mat silu_c;          // silu of conditioning vector
  Mat mod;             // 6d x 1 regressed modulation
};

struct ForwardCache {
  Mat features;        // (3F + d_text) x N
  Mat h0;              // after input projection (+ position codes)
  std::vector<BlockCache> blocks;
  Mat h_final;
  CondCache cond;
};

// One DiT block: two gated sub-layers (attention, feed-forward), each applied
// to a shift/scale-modulated layer norm of the running state.
inline Mat dit_block_forward(const Mat& h, const DitBlockParams& b, const Mat& cond,
                             const DenoiserConfig& cfg, BlockCache& c) {
  const int d = cfg.d;
  const int N = static_cast<int>(h.cols());
  const int dh = cfg.head_dim();
  c.h_in = h;
  c.cond_in = cond;
  c.silu_c = nn::silu(cond);
  c.mod = b.mod_w * c.silu_c + b.mod_b;
  const Vec shift_a = c.mod.block(0 * d, 0, d, 1);
  const Vec scale_a = c.mod.block(1 * d, 0, d, 1);
  const Vec gate_a = c.mod.block(2 * d, 0, d, 1);
  const Vec shift_f = c.mod.block(3 * d, 0, d, 1);
  const Vec scale_f = c.mod.block(4 * d, 0, d, 1);
  const Vec gate_f = c.mod.block(5 * d, 0, d, 1);

  nn::layer_norm_plain(h, c.ln1_hat, c.ln1_istd);
  c.xm1 = ((c.ln1_hat.array().colwise() * (1.0 + scale_a.array())).colwise() + shift_a.array())
              .matrix();

  c.q = (b.wq * c.xm1).colwise() + Vec(b.bq.col(0));
  c.k = (b.wk * c.xm1).colwise() + Vec(b.bk.col(0));
  c.v = (b.wv * c.xm1).colwise() + Vec(b.bv.col(0));

  c.attn_p.assign(cfg.n_heads, Mat());
  c.attn_o.resize(d, N);
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  for (int hd = 0; hd < cfg.n_heads; ++hd) {
    const auto qh = c.q.middleRows(hd * dh, dh);
    const auto kh = c.k.middleRows(hd * dh, dh);
    const auto vh = c.v.middleRows(hd * dh, dh);
    Mat s = qh.transpose() * kh * inv_sqrt;  // N x N, row = query
    Mat& pmat = c.attn_p[hd];
    pmat.resize(N, N);
    for (int i = 0; i < N; ++i) {
      const double mx = s.row(i).maxCoeff();
      Eigen::ArrayXd ex = (s.row(i).array() - mx).exp();
      pmat.row(i) = (ex / ex.sum()).matrix();
    }
    c.attn_o.middleRows(hd * dh, dh) = vh * pmat.transpose();
  }
  c.attn_y = (b.wo * c.attn_o).colwise() + Vec(b.bo.col(0));
  c.h_mid = h + (c.attn_y.array().colwise() * gate_a.array()).matrix();

  nn::layer_norm_plain(c.h_mid, c.ln2_hat, c.ln2_istd);
  c.xm2 = ((c.ln2_hat.array().colwise() * (1.0 + scale_f.array())).colwise() + shift_f.array())
              .matrix();
  c.ff_a = (b.wf1 * c.xm2).colwise() + Vec(b.bf1.col(0));
  c.ff_g = nn::gelu(c.ff_a);
  c.ff_out = (b.wf2 * c.ff_g).colwise() + Vec(b.bf2.col(0));
  return c.h_mid + (c.ff_out.array().colwise() * gate_f.array()).matrix();
}

// Returns d(loss)/d(h_in); accumulates parameter gradients and d(loss)/d(cond).
inline Mat dit_block_backward(const DitBlockParams& b, const BlockCache& c,
                              const DenoiserConfig& cfg, const Mat& dh_out,
                              DitBlockParams& gb, Mat& dcond) {
  const int d = cfg.d;
  const int N = static_cast<int>(c.h_in.cols());
  const int dh = cfg.head_dim();
  const Vec scale_a = c.mod.block(1 * d, 0, d, 1);
  const Vec gate_a = c.mod.block(2 * d, 0, d, 1);
  const Vec scale_f = c.mod.block(4 * d, 0, d, 1);
  const Vec gate_f = c.mod.block(5 * d, 0, d, 1);

  Mat dmod = Mat::Zero(6 * d, 1);

  // feed-forward sub-layer
  dmod.block(5 * d, 0, d, 1) = (dh_out.cwiseProduct(c.ff_out)).rowwise().sum();
  const Mat dff_out = (dh_out.array().colwise() * gate_f.array()).matrix();
  gb.wf2 += dff_out * c.ff_g.transpose();
  gb.bf2 += dff_out.rowwise().sum();
  const Mat dff_g = b.wf2.transpose() * dff_out;
  const Mat dff_a = nn::gelu_backward(c.ff_a, dff_g);
  gb.wf1 += dff_a * c.xm2.transpose();
  gb.bf1 += dff_a.rowwise().sum();
  const Mat dxm2 = b.wf1.transpose() * dff_a;
  dmod.block(4 * d, 0, d, 1) = (dxm2.cwiseProduct(c.ln2_hat)).rowwise().sum();
  dmod.block(3 * d, 0, d, 1) = dxm2.rowwise().sum();
  const Mat dln2 = (dxm2.array().colwise() * (1.0 + scale_f.array())).matrix();
  Mat dh_mid = dh_out + nn::layer_norm_plain_backward(c.ln2_hat, c.ln2_istd, dln2);

  // attention sub-layer
  dmod.block(2 * d, 0, d, 1) = (dh_mid.cwiseProduct(c.attn_y)).rowwise().sum();
  const Mat dy = (dh_mid.array().colwise() * gate_a.array()).matrix();
  gb.wo += dy * c.attn_o.transpose();
  gb.bo += dy.rowwise().sum();
  const Mat do_ = b.wo.transpose() * dy;

  Mat dq(d, N), dk(d, N), dv(d, N);
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  for (int hd = 0; hd < cfg.n_heads; ++hd) {
    const auto qh = c.q.middleRows(hd * dh, dh);
    const auto kh = c.k.middleRows(hd * dh, dh);
    const auto vh = c.v.middleRows(hd * dh, dh);
    const auto doh = do_.middleRows(hd * dh, dh);
    const Mat& pmat = c.attn_p[hd];

    dv.middleRows(hd * dh, dh) = doh * pmat;
    Mat dp = doh.transpose() * vh;  // N x N
    Mat ds(N, N);
    for (int i = 0; i < N; ++i) {
      const double dot = dp.row(i).dot(pmat.row(i));
      ds.row(i) = pmat.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
    }
    dq.middleRows(hd * dh, dh) = kh * ds.transpose() * inv_sqrt;
    dk.middleRows(hd * dh, dh) = qh * ds * inv_sqrt;
  }

  gb.wq += dq * c.xm1.transpose();
  gb.bq += dq.rowwise().sum();
  gb.wk += dk * c.xm1.transpose();
  gb.bk += dk.rowwise().sum();
  gb.wv += dv * c.xm1.transpose();
  gb.bv += dv.rowwise().sum();
  const Mat dxm1 = b.wq.transpose() * dq + b.wk.transpose() * dk + b.wv.transpose() * dv;
  dmod.block(1 * d, 0, d, 1) = (dxm1.cwiseProduct(c.ln1_hat)).rowwise().sum();
  dmod.block(0, 0, d, 1) = dxm1.rowwise().sum();
  const Mat dln1 = (dxm1.array().colwise() * (1.0 + scale_a.array())).matrix();
  const Mat dh_in = dh_mid + nn::layer_norm_plain_backward(c.ln1_hat, c.ln1_istd, dln1);

  gb.mod_w += dmod * c.silu_c.transpose();
  gb.mod_b += dmod;
  dcond += nn::silu_backward(c.cond_in, Mat(b.mod_w.transpose() * dmod));
  return dh_in;
}

// Velocity field: concatenated per-frame features through an input projection,
// position codes, gated DiT blocks, and an output projection back to F bins.
inline Mat denoise_forward(const Mat& x_t, const Mat& speech_ctx, const Mat& env_ctx,
                           const Mat& text_feat, const Mat& cond, const DenoiserParams& p,
                           const DenoiserConfig& cfg, ForwardCache* cache = nullptr) {
  cfg.validate();
  const int N = static_cast<int>(x_t.cols());
  require(x_t.rows() == cfg.F, "denoise_forward: x_t band count mismatch");
  require(speech_ctx.rows() == cfg.F && speech_ctx.cols() == N,
          "denoise_forward: speech context shape mismatch");
  require(env_ctx.rows() == cfg.F && env_ctx.cols() == N,
          "denoise_forward: env context shape mismatch");
  require(text_feat.rows() == cfg.d_text && text_feat.cols() == N,
          "denoise_forward: text feature shape mismatch");
  require(N >= 1 && N <= cfg.max_N, "denoise_forward: frame count outside [1, max_N]");
  require(all_finite(x_t) && all_finite(speech_ctx) && all_finite(env_ctx) &&
              all_finite(text_feat) && all_finite(cond),
          "denoise_forward: non-finite input");

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.features.resize(cfg.feature_dim(), N);
  c.features.topRows(cfg.F) = x_t;
  c.features.middleRows(cfg.F, cfg.F) = speech_ctx;
  c.features.middleRows(2 * cfg.F, cfg.F) = env_ctx;
  c.features.bottomRows(cfg.d_text) = text_feat;

  c.h0 = (p.in_w * c.features).colwise() + Eigen::VectorXd(p.in_b.col(0));
  if (cfg.use_pos_enc) c.h0 += frame_positional_encoding(cfg.d, N);

  c.blocks.resize(p.blocks.size());
  Mat h = c.h0;
  for (size_t i = 0; i < p.blocks.size(); ++i)
    h = dit_block_forward(h, p.blocks[i], cond, cfg, c.blocks[i]);
  c.h_final = h;
  return (p.out_w * h).colwise() + Eigen::VectorXd(p.out_b.col(0));
}

// Backpropagates d(loss)/d(v) through the whole field. Parameter gradients
// accumulate into `grads`; returns gradient w.r.t. the text feature rows so
// the caller can continue into the text embedder. `dcond` accumulates the
// conditioning-vector gradient.
inline Mat denoiser_backward(const DenoiserParams& p, const DenoiserConfig& cfg,
                             const ForwardCache& c, const Mat& dv, DenoiserParams& grads,
                             Mat& dcond) {
  grads.out_w += dv * c.h_final.transpose();
  grads.out_b += dv.rowwise().sum();
  Mat dh = p.out_w.transpose() * dv;
  for (int i = static_cast<int>(p.blocks.size()) - 1; i >= 0; --i)
    dh = dit_block_backward(p.blocks[i], c.blocks[i], cfg, dh, grads.blocks[i], dcond);
  grads.in_w += dh * c.features.transpose();
  grads.in_b += dh.rowwise().sum();
  const Mat dfeatures = p.in_w.transpose() * dh;
  return dfeatures.bottomRows(cfg.d_text);
}

// ---------------------------------------------------------------------------
// Training draw and masked loss
// ---------------------------------------------------------------------------

struct TrainingDraw {
  Mat x_t;                     // F x N interpolant
  Mat speech_ctx;              // F x N, zero on masked frames
  Mat env_ctx;                 // F x N, zero on masked frames
  ExtendedTokens tokens;       // length N
  std::vector<uint8_t> mask;   // length N, 1 = generate here
  Mat u_target;                // F x N target velocity
  double t = 0.0;
  double ser = 0.0;

  int frames() const { return static_cast<int>(x_t.cols()); }

  void validate(const DenoiserConfig& cfg) const {
    const int N = frames();
    require(x_t.rows() == cfg.F && u_target.rows() == cfg.F, "TrainingDraw: band mismatch");
    require(speech_ctx.cols() == N && env_ctx.cols() == N && u_target.cols() == N,
            "TrainingDraw: frame count mismatch");
    require(static_cast<int>(tokens.ids.size()) == N, "TrainingDraw: token length mismatch");
    require(static_cast<int>(mask.size()) == N, "TrainingDraw: mask length mismatch");
    bool any = false;
    for (uint8_t m : mask) any = any || m != 0;
    require(any, "TrainingDraw: mask selects no frames");
  }
};

// Mean over draws of sum_masked ||v - u||^2 / (masked_count * F).
inline double loss_and_gradients(const DenoiserParams& params, const DenoiserConfig& cfg,
                                 const std::vector<TrainingDraw>& draws,
                                 DenoiserParams& grads) {
  require(!draws.empty(), "loss_and_gradients: empty batch");
  grads = zero_like(params);
  double total = 0.0;
  const double batch_w = 1.0 / double(draws.size());

  for (const TrainingDraw& draw : draws) {
    draw.validate(cfg);
    const int N = draw.frames();

    TextForwardCache text_cache;
    const Mat text_feat = embed_text(draw.tokens, params.text, &text_cache);

    CondCache cond_cache;
    const Mat cond = cond_vector(draw.t, SerValue(draw.ser), params, cfg, &cond_cache);

    ForwardCache fwd;
    const Mat v = denoise_forward(draw.x_t, draw.speech_ctx, draw.env_ctx, text_feat, cond,
                                  params, cfg, &fwd);

    int masked = 0;
    for (uint8_t m : draw.mask) masked += m != 0;
    const double norm = 1.0 / (double(masked) * cfg.F);

    double draw_loss = 0.0;
    Mat dv = Mat::Zero(cfg.F, N);
    for (int j = 0; j < N; ++j) {
      if (!draw.mask[j]) continue;
      const Vec diff = v.col(j) - draw.u_target.col(j);
      draw_loss += diff.squaredNorm() * norm;
      dv.col(j) = 2.0 * norm * batch_w * diff;
    }
    total += draw_loss * batch_w;

    Mat dcond = Mat::Zero(cfg.d, 1);
    const Mat dtext = denoiser_backward(params, cfg, fwd, dv, grads, dcond);
    cond_vector_backward(params, cond_cache, dcond, grads);
    embed_text_backward(params.text, text_cache, dtext, grads.text);
  }
  require(std::isfinite(total), "loss_and_gradients: non-finite loss");
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "UMBR", version, config block, then named f32 tensors
// (u32 name length, name bytes, u32 rank, u32 dims, row-major values),
// all little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(bool(in), "checkpoint: truncated file");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
  const uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void put_tensor(std::ostream& out, const std::string& name, const Mat& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, 2);
  put_u32(out, static_cast<uint32_t>(t.rows()));
  put_u32(out, static_cast<uint32_t>(t.cols()));
  for (Eigen::Index r = 0; r < t.rows(); ++r)
    for (Eigen::Index cc = 0; cc < t.cols(); ++cc) put_f32(out, static_cast<float>(t(r, cc)));
}

inline std::pair<std::string, Mat> get_tensor(std::istream& in) {
  const uint32_t name_len = get_u32(in);
  require(name_len > 0 && name_len < 4096, "checkpoint: bad tensor name length");
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  require(bool(in), "checkpoint: truncated tensor name");
  const uint32_t rank = get_u32(in);
  require(rank == 2, "checkpoint: only rank-2 tensors supported");
  const uint32_t rows = get_u32(in);
  const uint32_t cols = get_u32(in);
  require(rows > 0 && cols > 0 && uint64_t(rows) * cols < (1ull << 28),
          "checkpoint: implausible tensor shape");
  Mat t(rows, cols);
  for (uint32_t r = 0; r < rows; ++r)
    for (uint32_t cc = 0; cc < cols; ++cc) t(r, cc) = double(get_f32(in));
  require(bool(in), "checkpoint: truncated tensor data");
  return {name, t};
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DenoiserConfig config;
  DenoiserParams params;
  std::map<std::string, Mat> extra;  // optimizer moments and counters
};

inline void save_checkpoint(const std::string& path, const DenoiserConfig& cfg,
                            DenoiserParams& params,
                            const std::map<std::string, Mat>& extra = {}) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "save_checkpoint: cannot open " + path);
  out.write("UMBR", 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(cfg.d));
  detail::put_u32(out, static_cast<uint32_t>(cfg.n_blocks));
  detail::put_u32(out, static_cast<uint32_t>(cfg.n_heads));
  detail::put_u32(out, static_cast<uint32_t>(cfg.d_text));
  detail::put_u32(out, static_cast<uint32_t>(cfg.F));
  detail::put_u32(out, static_cast<uint32_t>(cfg.max_N));
  detail::put_u32(out, static_cast<uint32_t>(cfg.ser_embed_dim));
  detail::put_u32(out, static_cast<uint32_t>(cfg.time_embed_dim));
  detail::put_u32(out, cfg.use_pos_enc ? 1 : 0);
  detail::put_f32(out, static_cast<float>(cfg.mel_mean));
  detail::put_f32(out, static_cast<float>(cfg.mel_std));

  auto refs = tensor_refs(params);
  detail::put_u32(out, static_cast<uint32_t>(refs.size() + extra.size()));
  for (auto& [name, t] : refs) detail::put_tensor(out, name, *t);
  for (const auto& [name, t] : extra) detail::put_tensor(out, name, t);
  require(bool(out), "save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(bool(in) && std::memcmp(magic, "UMBR", 4) == 0, "load_checkpoint: bad magic");
  const uint32_t version = detail::get_u32(in);
  require(version == kCheckpointVersion, "load_checkpoint: unsupported version");

  Checkpoint ck;
  ck.config.d = static_cast<int>(detail::get_u32(in));
  ck.config.n_blocks = static_cast<int>(detail::get_u32(in));
  ck.config.n_heads = static_cast<int>(detail::get_u32(in));
  ck.config.d_text = static_cast<int>(detail::get_u32(in));
  ck.config.F = static_cast<int>(detail::get_u32(in));
  ck.config.max_N = static_cast<int>(detail::get_u32(in));
  ck.config.ser_embed_dim = static_cast<int>(detail::get_u32(in));
  ck.config.time_embed_dim = static_cast<int>(detail::get_u32(in));
  ck.config.use_pos_enc = detail::get_u32(in) != 0;
  ck.config.mel_mean = double(detail::get_f32(in));
  ck.config.mel_std = double(detail::get_f32(in));
  ck.config.validate();

  std::map<std::string, Mat> tensors;
  const uint32_t count = detail::get_u32(in);
  for (uint32_t i = 0; i < count; ++i) {
    auto [name, t] = detail::get_tensor(in);
    require(tensors.emplace(name, std::move(t)).second,
            "load_checkpoint: duplicate tensor " + name);
  }

  // text block count and vocab size are recovered from the stored tensors
  int text_blocks = 0;
  while (tensors.count("text.block" + std::to_string(text_blocks) + ".dw_k")) ++text_blocks;
  const auto embed_it = tensors.find("text.embed");
  require(embed_it != tensors.end(), "load_checkpoint: missing text.embed");
  const int vocab = static_cast<int>(embed_it->second.rows());

  Rng rng(1);
  ck.params = init_denoiser(ck.config, 1, vocab);
  ck.params.text = init_text_embedder(vocab, ck.config.d_text, text_blocks, rng);
  for (auto& [name, dst] : tensor_refs(ck.params)) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "load_checkpoint: missing tensor " + name);
    require(it->second.rows() == dst->rows() && it->second.cols() == dst->cols(),
            "load_checkpoint: shape mismatch for " + name);
    *dst = it->second;
    tensors.erase(it);
  }
  ck.extra = std::move(tensors);
  return ck;
}

}  // namespace umbra
