#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "umbra/denoiser.hpp"
#include "umbra/flow.hpp"
#include "umbra/triplet.hpp"

namespace umbra {

struct TrainConfig {
  int64_t steps = 5000;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int frames_per_batch = 2048;
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;
  double mask_min_frac = 0.3;
  double mask_max_frac = 1.0;

  void validate(const DenoiserConfig& model) const {
    require(steps >= 0, "TrainConfig: steps must be non-negative");
    require(lr > 0.0 && eps > 0.0, "TrainConfig: lr and eps must be positive");
    require(weight_decay >= 0.0, "TrainConfig: weight decay must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "TrainConfig: betas must lie in [0,1)");
    require(checkpoint_every >= 1, "TrainConfig: checkpoint_every must be positive");
    require(mask_min_frac > 0.0 && mask_min_frac <= mask_max_frac && mask_max_frac <= 1.0,
            "TrainConfig: mask fractions must satisfy 0 < min <= max <= 1");
    require(frames_per_batch >= model.max_N,
            "TrainConfig: frames_per_batch must cover max_N");
  }
};

struct OptimizerState {
  DenoiserParams m;
  DenoiserParams v;
  int64_t step = 0;
};

inline OptimizerState init_optimizer(const DenoiserParams& params) {
  OptimizerState st;
  st.m = zero_like(params);
  st.v = zero_like(params);
  st.step = 0;
  return st;
}

// Decoupled weight decay applied before the adaptive update; parameters and
// moments land on the f32 grid after every step so checkpoints are lossless.
inline void adamw_step(DenoiserParams& params, const DenoiserParams& grads,
                       OptimizerState& st, const TrainConfig& cfg) {
  auto& gmut = const_cast<DenoiserParams&>(grads);
  auto g_refs = tensor_refs(gmut);
  for (auto& [name, g] : g_refs)
    require(all_finite(*g), "adamw_step: non-finite gradient in " + name);

  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  const double shrink = 1.0 - cfg.lr * cfg.weight_decay;

  auto p_refs = tensor_refs(params);
  auto m_refs = tensor_refs(st.m);
  auto v_refs = tensor_refs(st.v);
  for (size_t i = 0; i < p_refs.size(); ++i) {
    Mat& p = *p_refs[i].second;
    const Mat& g = *g_refs[i].second;
    Mat& m = *m_refs[i].second;
    Mat& v = *v_refs[i].second;

    p *= shrink;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat m_hat = m / bc1;
    const Mat v_hat = v / bc2;
    p -= cfg.lr * m_hat.cwiseQuotient((v_hat.array().sqrt() + cfg.eps).matrix());
    quantize_f32(p);
    quantize_f32(m);
    quantize_f32(v);
  }
}

// Greedy packing of shuffled sample indices under a frame budget.
inline std::vector<std::vector<int>> make_batches(const std::vector<int>& lengths,
                                                  int frames_per_batch, Rng& rng) {
  require(frames_per_batch >= 1, "make_batches: budget must be positive");
  for (size_t i = 0; i < lengths.size(); ++i)
    require(lengths[i] >= 1 && lengths[i] <= frames_per_batch,
            "make_batches: sample " + std::to_string(i) + " does not fit the frame budget");

  std::vector<int> order(lengths.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(i)]);

  std::vector<std::vector<int>> batches;
  std::vector<int> current;
  int used = 0;
  for (int idx : order) {
    if (used + lengths[idx] > frames_per_batch && !current.empty()) {
      batches.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(idx);
    used += lengths[idx];
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

namespace detail {

inline std::map<std::string, Mat> pack_optimizer(OptimizerState& st) {
  std::map<std::string, Mat> extra;
  for (auto& [name, t] : tensor_refs(st.m)) extra["opt.m." + name] = *t;
  for (auto& [name, t] : tensor_refs(st.v)) extra["opt.v." + name] = *t;
  extra["opt.step"] = Mat::Constant(1, 1, double(st.step));
  return extra;
}

inline OptimizerState unpack_optimizer(const DenoiserParams& params,
                                       const std::map<std::string, Mat>& extra) {
  OptimizerState st = init_optimizer(params);
  for (auto& [name, t] : tensor_refs(st.m)) {
    const auto it = extra.find("opt.m." + name);
    require(it != extra.end(), "checkpoint: missing optimizer tensor opt.m." + name);
    *t = it->second;
  }
  for (auto& [name, t] : tensor_refs(st.v)) {
    const auto it = extra.find("opt.v." + name);
    require(it != extra.end(), "checkpoint: missing optimizer tensor opt.v." + name);
    *t = it->second;
  }
  const auto step_it = extra.find("opt.step");
  require(step_it != extra.end(), "checkpoint: missing opt.step");
  st.step = static_cast<int64_t>(step_it->second(0, 0));
  return st;
}

}  // namespace detail

// Runs masked flow-matching training over a manifest of triplets. Writes
// ckpt_<step>.umbr files plus a step<TAB>loss log, and returns the path of
// the final checkpoint. Pass resume_path to continue an interrupted run.
inline std::string train(const TrainConfig& cfg, const DenoiserConfig& model_cfg,
                         const MelConfig& mel_cfg, const std::string& manifest_path,
                         const std::string& out_dir, const std::string& resume_path = "") {
  model_cfg.validate();
  cfg.validate(model_cfg);
  const CharVocab vocab = default_vocab();

  const Manifest manifest = read_manifest(manifest_path);
  require(!manifest.records.empty(), "train: manifest holds no samples");
  std::vector<TripletSample> triplets;
  triplets.reserve(manifest.records.size());
  std::vector<int> lengths;
  for (const auto& rec : manifest.records) {
    triplets.push_back(load_triplet(rec, manifest_path, mel_cfg));
    require(triplets.back().target_mel.F() == model_cfg.F,
            "train: sample " + rec.id + " band count differs from the model");
    require(triplets.back().target_mel.N() <= model_cfg.max_N,
            "train: sample " + rec.id + " exceeds max_N");
    lengths.push_back(triplets.back().target_mel.N());
  }

  DenoiserParams params;
  OptimizerState opt;
  if (resume_path.empty()) {
    params = init_denoiser(model_cfg, derive_seed(cfg.seed, 0x1417), vocab.size);
    quantize_params(params);
    opt = init_optimizer(params);
  } else {
    Checkpoint ck = load_checkpoint(resume_path);
    require(ck.config.d == model_cfg.d && ck.config.n_blocks == model_cfg.n_blocks &&
                ck.config.F == model_cfg.F && ck.config.d_text == model_cfg.d_text,
            "train: resume checkpoint was built for a different model");
    params = std::move(ck.params);
    opt = detail::unpack_optimizer(params, ck.extra);
  }

  std::filesystem::create_directories(out_dir);
  const auto ckpt_path = [&](int64_t step) {
    return (std::filesystem::path(out_dir) / ("ckpt_" + std::to_string(step) + ".umbr"))
        .string();
  };
  std::ofstream log((std::filesystem::path(out_dir) / "loss_log.tsv").string(),
                    resume_path.empty() ? std::ios::trunc : std::ios::app);
  require(bool(log), "train: cannot open loss log in " + out_dir);
  log.precision(17);

  // replay epoch packing up to the current step so resumed runs see the
  // exact batch schedule of an uninterrupted one
  int64_t epoch = 0;
  int64_t consumed = 0;  // steps consumed by fully processed epochs
  auto epoch_batches = [&](int64_t e) {
    Rng erng(derive_seed(cfg.seed, 0xe90c4, uint64_t(e)));
    return make_batches(lengths, cfg.frames_per_batch, erng);
  };
  std::vector<std::vector<int>> batches = epoch_batches(0);
  while (consumed + int64_t(batches.size()) <= opt.step) {
    consumed += int64_t(batches.size());
    ++epoch;
    batches = epoch_batches(epoch);
  }

  DenoiserParams grads = zero_like(params);
  while (opt.step < cfg.steps) {
    const int64_t s = opt.step;
    if (s - consumed >= int64_t(batches.size())) {
      consumed += int64_t(batches.size());
      ++epoch;
      batches = epoch_batches(epoch);
    }
    const std::vector<int>& batch = batches[size_t(s - consumed)];

    double loss = 0.0;
    try {
      Rng step_rng(derive_seed(cfg.seed, 0xd4a40, uint64_t(s)));
      std::vector<TrainingDraw> draws;
      draws.reserve(batch.size());
      for (int idx : batch)
        draws.push_back(make_training_draw(triplets[size_t(idx)], vocab, model_cfg,
                                           step_rng, cfg.mask_min_frac, cfg.mask_max_frac));
      loss = loss_and_gradients(params, model_cfg, draws, grads);
      log << (s + 1) << '\t' << loss << '\n';
      log.flush();
      adamw_step(params, grads, opt, cfg);
    } catch (const std::exception& e) {
      throw std::runtime_error("train: aborted at step " + std::to_string(s + 1) + ": " +
                               e.what());
    }

    if (opt.step % cfg.checkpoint_every == 0 && opt.step < cfg.steps)
      save_checkpoint(ckpt_path(opt.step), model_cfg, params, detail::pack_optimizer(opt));
  }

  const std::string final_path = ckpt_path(opt.step);
  save_checkpoint(final_path, model_cfg, params, detail::pack_optimizer(opt));
  return final_path;
}

}  // namespace umbra
