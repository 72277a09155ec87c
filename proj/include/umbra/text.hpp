#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "umbra/common.hpp"

namespace umbra {

struct CharVocab {
  std::map<char, int> char_to_id;
  int filler_id = 0;
  int unk_id = 0;
  int size = 0;

  void validate() const {
    require(size >= 2, "CharVocab: need at least filler and unk");
    require(filler_id >= 0 && filler_id < size, "CharVocab: filler_id out of range");
    require(unk_id >= 0 && unk_id < size, "CharVocab: unk_id out of range");
    for (const auto& [c, id] : char_to_id) {
      require(id >= 0 && id < size, "CharVocab: mapped id out of range");
      require(id != filler_id, "CharVocab: filler_id must not map from a character");
    }
  }
};

// Printable ASCII (0x20..0x7E) -> ids 0..94, then filler and unknown.
inline CharVocab default_vocab() {
  CharVocab v;
  int id = 0;
  for (char c = 0x20; c <= 0x7E; ++c) v.char_to_id[c] = id++;
  v.filler_id = id++;
  v.unk_id = id++;
  v.size = id;
  return v;
}

inline std::vector<int> tokenize(const std::string& text, const CharVocab& vocab) {
  require(!text.empty(), "tokenize: empty text");
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    const auto it = vocab.char_to_id.find(c);
    ids.push_back(it == vocab.char_to_id.end() ? vocab.unk_id : it->second);
  }
  return ids;
}

struct ExtendedTokens {
  std::vector<int> ids;  // length N; [0, char_count) are characters, rest filler
  int char_count = 0;

  int N() const { return static_cast<int>(ids.size()); }
};

inline ExtendedTokens extend_with_filler(const std::vector<int>& ids, int n,
                                         const CharVocab& vocab) {
  require(static_cast<int>(ids.size()) <= n,
          "extend_with_filler: token count exceeds target length");
  ExtendedTokens out;
  out.char_count = static_cast<int>(ids.size());
  out.ids = ids;
  out.ids.resize(n, vocab.filler_id);
  return out;
}

// ceil(ref_frames * S_gen / S_ref)
inline int estimate_target_length(const std::string& gen_text, const std::string& ref_text,
                                  int ref_frames) {
  require(!gen_text.empty() && !ref_text.empty(), "estimate_target_length: empty text");
  require(ref_frames >= 1, "estimate_target_length: ref_frames must be >= 1");
  const long long s_gen = static_cast<long long>(gen_text.size());
  const long long s_ref = static_cast<long long>(ref_text.size());
  return static_cast<int>((static_cast<long long>(ref_frames) * s_gen + s_ref - 1) / s_ref);
}

// ---------------------------------------------------------------------------
// Text embedding network: token embedding, two depthwise-conv blocks with
// pointwise expansion and response normalization, then a linear head. Features
// are d x N, one column per sequence position.
// ---------------------------------------------------------------------------

inline constexpr int kConvWidth = 7;
inline constexpr int kConvRadius = kConvWidth / 2;
inline constexpr double kLnEps = 1e-5;
inline constexpr double kGrnEps = 1e-6;

struct ConvBlockParams {
  Mat dw_k;   // d x 7 depthwise kernel
  Mat dw_b;   // d x 1
  Mat ln_g;   // d x 1
  Mat ln_b;   // d x 1
  Mat pw1_w;  // 2d x d
  Mat pw1_b;  // 2d x 1
  Mat grn_g;  // 2d x 1
  Mat grn_b;  // 2d x 1
  Mat pw2_w;  // d x 2d
  Mat pw2_b;  // d x 1
};

struct TextEmbedderParams {
  Mat embed;  // vocab x d
  std::vector<ConvBlockParams> blocks;
  Mat out_w;  // d_text x d
  Mat out_b;  // d_text x 1

  int dim() const { return static_cast<int>(embed.cols()); }
  int vocab_size() const { return static_cast<int>(embed.rows()); }
};

inline TextEmbedderParams init_text_embedder(int vocab_size, int d_text, int n_blocks,
                                             Rng& rng) {
  require(vocab_size >= 2 && d_text >= 1 && n_blocks >= 0, "init_text_embedder: bad shape");
  TextEmbedderParams p;
  const int d = d_text;
  p.embed = random_normal(vocab_size, d, rng, 1.0);
  p.blocks.resize(n_blocks);
  for (auto& b : p.blocks) {
    b.dw_k = random_normal(d, kConvWidth, rng, 1.0 / std::sqrt(double(kConvWidth)));
    b.dw_b = Mat::Zero(d, 1);
    b.ln_g = Mat::Ones(d, 1);
    b.ln_b = Mat::Zero(d, 1);
    b.pw1_w = random_normal(2 * d, d, rng, 1.0 / std::sqrt(double(d)));
    b.pw1_b = Mat::Zero(2 * d, 1);
    b.grn_g = Mat::Zero(2 * d, 1);
    b.grn_b = Mat::Zero(2 * d, 1);
    b.pw2_w = random_normal(d, 2 * d, rng, 1.0 / std::sqrt(2.0 * d));
    b.pw2_b = Mat::Zero(d, 1);
  }
  p.out_w = random_normal(d_text, d, rng, 1.0 / std::sqrt(double(d)));
  p.out_b = Mat::Zero(d_text, 1);
  return p;
}

inline int receptive_field(const TextEmbedderParams& p) {
  return static_cast<int>(p.blocks.size()) * kConvRadius;
}

namespace nn {

// y(c,j) = sum_t k(c,t) x(c, j+t-R) + b(c), zero padded
inline Mat depthwise_conv(const Mat& x, const Mat& k, const Mat& b) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  Mat y = Mat::Zero(C, N);
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < N; ++j) {
      double acc = b(c, 0);
      for (int t = 0; t < kConvWidth; ++t) {
        const int src = j + t - kConvRadius;
        if (src >= 0 && src < N) acc += k(c, t) * x(c, src);
      }
      y(c, j) = acc;
    }
  return y;
}

inline void depthwise_conv_backward(const Mat& x, const Mat& k, const Mat& g, Mat& dx,
                                    Mat& dk, Mat& db) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  dx = Mat::Zero(C, N);
  dk = Mat::Zero(C, kConvWidth);
  db = Mat::Zero(C, 1);
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < N; ++j) {
      const double gj = g(c, j);
      db(c, 0) += gj;
      for (int t = 0; t < kConvWidth; ++t) {
        const int src = j + t - kConvRadius;
        if (src >= 0 && src < N) {
          dk(c, t) += gj * x(c, src);
          dx(c, src) += gj * k(c, t);
        }
      }
    }
}

// per-column layer norm over channels, with affine
inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, Mat* x_hat_out,
                      Vec* istd_out) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  Mat y(C, N);
  if (x_hat_out) x_hat_out->resize(C, N);
  if (istd_out) istd_out->resize(N);
  for (int j = 0; j < N; ++j) {
    const double mu = x.col(j).mean();
    const double var = (x.col(j).array() - mu).square().mean();
    const double istd = 1.0 / std::sqrt(var + kLnEps);
    for (int c = 0; c < C; ++c) {
      const double xh = (x(c, j) - mu) * istd;
      if (x_hat_out) (*x_hat_out)(c, j) = xh;
      y(c, j) = gamma(c, 0) * xh + beta(c, 0);
    }
    if (istd_out) (*istd_out)(j) = istd;
  }
  return y;
}

inline void layer_norm_backward(const Mat& x_hat, const Vec& istd, const Mat& gamma,
                                const Mat& g, Mat& dx, Mat& dgamma, Mat& dbeta) {
  const int C = static_cast<int>(x_hat.rows());
  const int N = static_cast<int>(x_hat.cols());
  dx.resize(C, N);
  dgamma = Mat::Zero(C, 1);
  dbeta = Mat::Zero(C, 1);
  for (int j = 0; j < N; ++j) {
    Vec gg(C);
    for (int c = 0; c < C; ++c) {
      dgamma(c, 0) += g(c, j) * x_hat(c, j);
      dbeta(c, 0) += g(c, j);
      gg(c) = g(c, j) * gamma(c, 0);
    }
    const double mean_gg = gg.mean();
    const double mean_gg_xhat = (gg.array() * x_hat.col(j).array()).mean();
    for (int c = 0; c < C; ++c)
      dx(c, j) = istd(j) * (gg(c) - mean_gg - x_hat(c, j) * mean_gg_xhat);
  }
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad_scalar(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

inline Mat gelu(const Mat& x) { return x.unaryExpr([](double v) { return gelu_scalar(v); }); }

inline Mat gelu_backward(const Mat& x, const Mat& g) {
  return g.cwiseProduct(x.unaryExpr([](double v) { return gelu_grad_scalar(v); }));
}

// Per-position response normalization over channels with squared response:
// m_j = mean_c x(c,j)^2 + eps; y = gamma (.) (x^3 / m_j) + beta + x
inline Mat grn(const Mat& x, const Mat& gamma, const Mat& beta, Vec* m_out) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  Mat y(C, N);
  if (m_out) m_out->resize(N);
  for (int j = 0; j < N; ++j) {
    const double m = x.col(j).squaredNorm() / C + kGrnEps;
    if (m_out) (*m_out)(j) = m;
    for (int c = 0; c < C; ++c) {
      const double xc = x(c, j);
      y(c, j) = gamma(c, 0) * (xc * xc * xc / m) + beta(c, 0) + xc;
    }
  }
  return y;
}

inline void grn_backward(const Mat& x, const Vec& m, const Mat& gamma, const Mat& g, Mat& dx,
                         Mat& dgamma, Mat& dbeta) {
  const int C = static_cast<int>(x.rows());
  const int N = static_cast<int>(x.cols());
  dx.resize(C, N);
  dgamma = Mat::Zero(C, 1);
  dbeta = Mat::Zero(C, 1);
  for (int j = 0; j < N; ++j) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      const double x3 = x(c, j) * x(c, j) * x(c, j);
      dgamma(c, 0) += g(c, j) * x3 / m(j);
      dbeta(c, 0) += g(c, j);
      s += g(c, j) * gamma(c, 0) * x3;
    }
    for (int c = 0; c < C; ++c) {
      const double xc = x(c, j);
      dx(c, j) = g(c, j) * (1.0 + 3.0 * gamma(c, 0) * xc * xc / m(j)) -
                 2.0 * xc * s / (C * m(j) * m(j));
    }
  }
}

inline Mat linear(const Mat& w, const Mat& b, const Mat& x) {
  return (w * x).colwise() + Eigen::VectorXd(b.col(0));
}

inline void linear_backward(const Mat& w, const Mat& x, const Mat& g, Mat& dx, Mat& dw,
                            Mat& db) {
  dw = g * x.transpose();
  db = g.rowwise().sum();
  dx = w.transpose() * g;
}

}  // namespace nn

struct TextBlockCache {
  Mat x_in;
  Mat conv_out;
  Mat ln_hat;
  Vec ln_istd;
  Mat pw1_in;   // ln output
  Mat pw1_out;  // pre-activation
  Mat act_out;
  Vec grn_m;
  Mat grn_out;
};

struct TextForwardCache {
  std::vector<int> ids;
  Mat embedded;
  std::vector<TextBlockCache> blocks;
  Mat head_in;
};

inline Mat embed_text(const ExtendedTokens& z, const TextEmbedderParams& p,
                      TextForwardCache* cache = nullptr) {
  require(z.N() >= 1, "embed_text: empty token sequence");
  const int N = z.N();
  const int d = p.dim();
  Mat h(d, N);
  for (int j = 0; j < N; ++j) {
    const int id = z.ids[j];
    require(id >= 0 && id < p.vocab_size(), "embed_text: token id out of vocab range");
    h.col(j) = p.embed.row(id).transpose();
  }
  if (cache) {
    cache->ids = z.ids;
    cache->embedded = h;
    cache->blocks.resize(p.blocks.size());
  }

  for (size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const ConvBlockParams& b = p.blocks[bi];
    TextBlockCache local;
    TextBlockCache& c = cache ? cache->blocks[bi] : local;
    c.x_in = h;
    c.conv_out = nn::depthwise_conv(h, b.dw_k, b.dw_b);
    c.pw1_in = nn::layer_norm(c.conv_out, b.ln_g, b.ln_b, &c.ln_hat, &c.ln_istd);
    c.pw1_out = nn::linear(b.pw1_w, b.pw1_b, c.pw1_in);
    c.act_out = nn::gelu(c.pw1_out);
    c.grn_out = nn::grn(c.act_out, b.grn_g, b.grn_b, &c.grn_m);
    h = c.x_in + nn::linear(b.pw2_w, b.pw2_b, c.grn_out);
  }

  if (cache) cache->head_in = h;
  return nn::linear(p.out_w, p.out_b, h);
}

// Gradients use the same shapes as the parameters.
inline TextEmbedderParams zero_like(const TextEmbedderParams& p) {
  TextEmbedderParams g;
  g.embed = Mat::Zero(p.embed.rows(), p.embed.cols());
  g.blocks.resize(p.blocks.size());
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const ConvBlockParams& b = p.blocks[i];
    ConvBlockParams& o = g.blocks[i];
    o.dw_k = Mat::Zero(b.dw_k.rows(), b.dw_k.cols());
    o.dw_b = Mat::Zero(b.dw_b.rows(), 1);
    o.ln_g = Mat::Zero(b.ln_g.rows(), 1);
    o.ln_b = Mat::Zero(b.ln_b.rows(), 1);
    o.pw1_w = Mat::Zero(b.pw1_w.rows(), b.pw1_w.cols());
    o.pw1_b = Mat::Zero(b.pw1_b.rows(), 1);
    o.grn_g = Mat::Zero(b.grn_g.rows(), 1);
    o.grn_b = Mat::Zero(b.grn_b.rows(), 1);
    o.pw2_w = Mat::Zero(b.pw2_w.rows(), b.pw2_w.cols());
    o.pw2_b = Mat::Zero(b.pw2_b.rows(), 1);
  }
  g.out_w = Mat::Zero(p.out_w.rows(), p.out_w.cols());
  g.out_b = Mat::Zero(p.out_b.rows(), 1);
  return g;
}

// Accumulates parameter gradients for d(loss)/d(output features).
inline void embed_text_backward(const TextEmbedderParams& p, const TextForwardCache& cache,
                                const Mat& d_out, TextEmbedderParams& grads) {
  Mat dh;
  {
    Mat dw, db;
    nn::linear_backward(p.out_w, cache.head_in, d_out, dh, dw, db);
    grads.out_w += dw;
    grads.out_b += db;
  }

  for (int bi = static_cast<int>(p.blocks.size()) - 1; bi >= 0; --bi) {
    const ConvBlockParams& b = p.blocks[bi];
    const TextBlockCache& c = cache.blocks[bi];
    ConvBlockParams& gb = grads.blocks[bi];

    Mat d_grn_out, dw, db;
    nn::linear_backward(b.pw2_w, c.grn_out, dh, d_grn_out, dw, db);
    gb.pw2_w += dw;
    gb.pw2_b += db;

    Mat d_act, dgg, dgb;
    nn::grn_backward(c.act_out, c.grn_m, b.grn_g, d_grn_out, d_act, dgg, dgb);
    gb.grn_g += dgg;
    gb.grn_b += dgb;

    const Mat d_pw1_out = nn::gelu_backward(c.pw1_out, d_act);

    Mat d_pw1_in;
    nn::linear_backward(b.pw1_w, c.pw1_in, d_pw1_out, d_pw1_in, dw, db);
    gb.pw1_w += dw;
    gb.pw1_b += db;

    Mat d_conv, dlg, dlb;
    nn::layer_norm_backward(c.ln_hat, c.ln_istd, b.ln_g, d_pw1_in, d_conv, dlg, dlb);
    gb.ln_g += dlg;
    gb.ln_b += dlb;

    Mat d_x, dk, dcb;
    nn::depthwise_conv_backward(c.x_in, b.dw_k, d_conv, d_x, dk, dcb);
    gb.dw_k += dk;
    gb.dw_b += dcb;

    dh = dh + d_x;  // residual path
  }

  for (int j = 0; j < static_cast<int>(cache.ids.size()); ++j)
    grads.embed.row(cache.ids[j]) += dh.col(j).transpose();
}

inline std::vector<std::pair<std::string, Mat*>> text_tensor_refs(TextEmbedderParams& p,
                                                                  const std::string& prefix) {
  std::vector<std::pair<std::string, Mat*>> refs;
  refs.emplace_back(prefix + "embed", &p.embed);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string bp = prefix + "block" + std::to_string(i) + ".";
    ConvBlockParams& b = p.blocks[i];
    refs.emplace_back(bp + "dw_k", &b.dw_k);
    refs.emplace_back(bp + "dw_b", &b.dw_b);
    refs.emplace_back(bp + "ln_g", &b.ln_g);
    refs.emplace_back(bp + "ln_b", &b.ln_b);
    refs.emplace_back(bp + "pw1_w", &b.pw1_w);
    refs.emplace_back(bp + "pw1_b", &b.pw1_b);
    refs.emplace_back(bp + "grn_g", &b.grn_g);
    refs.emplace_back(bp + "grn_b", &b.grn_b);
    refs.emplace_back(bp + "pw2_w", &b.pw2_w);
    refs.emplace_back(bp + "pw2_b", &b.pw2_b);
  }
  refs.emplace_back(prefix + "out_w", &p.out_w);
  refs.emplace_back(prefix + "out_b", &p.out_b);
  return refs;
}

// ---------------------------------------------------------------------------
// Vocabulary serialization: "filler <id>" and "unk <id>" header lines, then
// one character per line; id = line index after the header.
// ---------------------------------------------------------------------------

inline void save_vocab(const std::string& path, const CharVocab& vocab) {
  vocab.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_vocab: cannot open " + path);
  os << "filler " << vocab.filler_id << "\n";
  os << "unk " << vocab.unk_id << "\n";
  std::vector<char> by_id(vocab.size, '\0');
  std::vector<bool> have(vocab.size, false);
  for (const auto& [c, id] : vocab.char_to_id) {
    by_id[id] = c;
    have[id] = true;
  }
  for (int id = 0; id < vocab.size; ++id) {
    if (id == vocab.filler_id || id == vocab.unk_id) {
      os << "\n";
    } else {
      require(have[id], "save_vocab: id gap");
      os << by_id[id] << "\n";
    }
  }
  if (!os) throw std::runtime_error("save_vocab: write failed for " + path);
}

inline CharVocab load_vocab(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_vocab: cannot open " + path);
  std::string line;
  CharVocab v;
  if (!std::getline(is, line) || line.rfind("filler ", 0) != 0)
    throw std::runtime_error("load_vocab: missing filler header");
  v.filler_id = std::stoi(line.substr(7));
  if (!std::getline(is, line) || line.rfind("unk ", 0) != 0)
    throw std::runtime_error("load_vocab: missing unk header");
  v.unk_id = std::stoi(line.substr(4));
  int id = 0;
  while (std::getline(is, line)) {
    if (id != v.filler_id && id != v.unk_id) {
      if (line.size() != 1) throw std::runtime_error("load_vocab: malformed character line");
      v.char_to_id[line[0]] = id;
    }
    ++id;
  }
  v.size = id;
  v.validate();
  return v;
}

}  // namespace umbra
