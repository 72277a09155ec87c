#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "umbra/trainer.hpp"

using namespace umbra;

namespace {

DenoiserConfig toy_model() {
  DenoiserConfig cfg;
  cfg.d = 16;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.d_text = 8;
  cfg.F = 10;
  cfg.max_N = 48;
  return cfg;
}

TrainConfig toy_train(int64_t steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.lr = 1e-3;
  tc.frames_per_batch = 64;
  tc.checkpoint_every = 3;
  tc.seed = 7;
  return tc;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "umbra_trainer_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// writes a tiny manifest with n toy triplets and returns its path
std::string toy_manifest(const std::filesystem::path& dir, const DenoiserConfig& cfg, int n,
                         uint64_t seed) {
  MelConfig mc;
  mc.n_mels = cfg.F;
  Rng rng(seed);
  Manifest man;
  for (int i = 0; i < n; ++i) {
    const int frames = 16 + static_cast<int>(rng.uniform_int(8));
    const int env_frames = 4 + static_cast<int>(rng.uniform_int(4));
    MelSpectrogram target, speech, env;
    target.config = speech.config = env.config = mc;
    target.values = random_normal(cfg.F, frames, rng) * 1.5 - Mat::Constant(cfg.F, frames, 5.0);
    speech.values = random_normal(cfg.F, frames, rng) * 1.5 - Mat::Constant(cfg.F, frames, 5.0);
    env.values =
        random_normal(cfg.F, env_frames, rng) * 1.5 - Mat::Constant(cfg.F, env_frames, 6.0);

    const std::string stem = "s" + std::to_string(i);
    write_mel((dir / (stem + "_t.umel")).string(), target);
    write_mel((dir / (stem + "_s.umel")).string(), speech);
    write_mel((dir / (stem + "_e.umel")).string(), env);

    ManifestRecord rec;
    rec.id = stem;
    rec.target_mel = stem + "_t.umel";
    rec.speech_mel = stem + "_s.umel";
    rec.env_mel = stem + "_e.umel";
    rec.transcript = i % 2 == 0 ? "hey there" : "ok";
    rec.ser = 0.1 + 0.2 * (i % 4);
    rec.strategy = to_string(Strategy::SYNTHETIC);
    man.records.push_back(rec);
  }
  const std::string path = (dir / "manifest.jsonl").string();
  write_manifest(man, path);
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("one optimizer step matches the closed form") {
  const DenoiserConfig cfg = toy_model();
  DenoiserParams p = init_denoiser(cfg, 1, 97);
  quantize_params(p);
  const DenoiserParams before = p;

  DenoiserParams g = zero_like(p);
  Rng rng(2);
  for (auto& [name, t] : tensor_refs(g)) {
    *t = random_normal(t->rows(), t->cols(), rng, 0.1);
    quantize_f32(*t);
  }

  TrainConfig tc;
  tc.lr = 0.01;
  tc.weight_decay = 0.0;
  OptimizerState st = init_optimizer(p);
  adamw_step(p, g, st, tc);
  REQUIRE(st.step == 1);

  auto pr = tensor_refs(p);
  auto br = const_cast<DenoiserParams&>(before), gr = const_cast<DenoiserParams&>(g);
  auto before_refs = tensor_refs(br);
  auto g_refs = tensor_refs(gr);
  for (size_t i = 0; i < pr.size(); ++i) {
    const Mat& b = *before_refs[i].second;
    const Mat& grad = *g_refs[i].second;
    Mat expect =
        b - tc.lr * grad.cwiseQuotient((grad.cwiseAbs2().array().sqrt() + tc.eps).matrix());
    quantize_f32(expect);
    INFO(pr[i].first);
    REQUIRE((*pr[i].second - expect).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("zero gradients without decay leave parameters untouched") {
  const DenoiserConfig cfg = toy_model();
  DenoiserParams p = init_denoiser(cfg, 3, 97);
  quantize_params(p);
  const DenoiserParams before = p;
  const DenoiserParams g = zero_like(p);

  TrainConfig tc;
  tc.weight_decay = 0.0;
  OptimizerState st = init_optimizer(p);
  adamw_step(p, g, st, tc);
  adamw_step(p, g, st, tc);

  auto pr = tensor_refs(p);
  auto br = const_cast<DenoiserParams&>(before);
  auto before_refs = tensor_refs(br);
  for (size_t i = 0; i < pr.size(); ++i) REQUIRE(*pr[i].second == *before_refs[i].second);
}

TEST_CASE("weight decay shrinks parameters even with zero gradients") {
  const DenoiserConfig cfg = toy_model();
  DenoiserParams p = init_denoiser(cfg, 5, 97);
  quantize_params(p);
  const Mat before = p.in_w;
  const DenoiserParams g = zero_like(p);

  TrainConfig tc;
  tc.lr = 0.1;
  tc.weight_decay = 0.5;
  OptimizerState st = init_optimizer(p);
  const int n_steps = 3;
  for (int i = 0; i < n_steps; ++i) adamw_step(p, g, st, tc);

  const double factor = std::pow(1.0 - tc.lr * tc.weight_decay, n_steps);
  REQUIRE((p.in_w - factor * before).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("non-finite gradients are refused") {
  const DenoiserConfig cfg = toy_model();
  DenoiserParams p = init_denoiser(cfg, 7, 97);
  DenoiserParams g = zero_like(p);
  g.in_w(0, 0) = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  OptimizerState st = init_optimizer(p);
  REQUIRE_THROWS_AS(adamw_step(p, g, st, tc), std::invalid_argument);
}

TEST_CASE("batches pack greedily under the frame budget") {
  Rng rng(11);
  const std::vector<int> lengths(10, 20);
  const auto batches = make_batches(lengths, 60, rng);
  REQUIRE(batches.size() == 4);
  REQUIRE(batches[0].size() == 3);
  REQUIRE(batches[1].size() == 3);
  REQUIRE(batches[2].size() == 3);
  REQUIRE(batches[3].size() == 1);

  std::vector<int> seen(10, 0);
  for (const auto& b : batches)
    for (int idx : b) seen[size_t(idx)] += 1;
  for (int count : seen) REQUIRE(count == 1);
}

TEST_CASE("batching covers every sample once per epoch") {
  Rng rng(12);
  std::vector<int> lengths;
  for (int i = 0; i < 23; ++i) lengths.push_back(5 + int(rng.uniform_int(30)));
  const auto batches = make_batches(lengths, 40, rng);
  std::vector<int> seen(lengths.size(), 0);
  for (const auto& b : batches) {
    int used = 0;
    for (int idx : b) {
      seen[size_t(idx)] += 1;
      used += lengths[size_t(idx)];
    }
    REQUIRE(used <= 40);
  }
  for (int count : seen) REQUIRE(count == 1);
}

TEST_CASE("oversized samples cannot be batched") {
  Rng rng(13);
  REQUIRE_THROWS_AS(make_batches({10, 50}, 40, rng), std::invalid_argument);
  REQUIRE(make_batches({}, 40, rng).empty());
}

TEST_CASE("zero-step training checkpoints the initial parameters") {
  const DenoiserConfig cfg = toy_model();
  const auto dir = fresh_dir("zero_steps");
  const std::string manifest = toy_manifest(dir, cfg, 2, 21);
  MelConfig mc;
  mc.n_mels = cfg.F;

  const std::string final_path = train(toy_train(0), cfg, mc, manifest, (dir / "run").string());
  REQUIRE(std::filesystem::path(final_path).filename() == "ckpt_0.umbr");
  REQUIRE(std::filesystem::exists(final_path));

  const Checkpoint ck = load_checkpoint(final_path);
  REQUIRE(ck.extra.at("opt.step")(0, 0) == 0.0);

  std::ifstream log(dir / "run" / "loss_log.tsv");
  REQUIRE(bool(log));
  std::string line;
  REQUIRE(!std::getline(log, line));
}

TEST_CASE("training writes checkpoints and a parseable loss log") {
  const DenoiserConfig cfg = toy_model();
  const auto dir = fresh_dir("smoke");
  const std::string manifest = toy_manifest(dir, cfg, 3, 22);
  MelConfig mc;
  mc.n_mels = cfg.F;

  const std::string final_path =
      train(toy_train(7), cfg, mc, manifest, (dir / "run").string());
  REQUIRE(std::filesystem::path(final_path).filename() == "ckpt_7.umbr");
  for (int s : {3, 6, 7})
    REQUIRE(std::filesystem::exists(dir / "run" / ("ckpt_" + std::to_string(s) + ".umbr")));
  REQUIRE(!std::filesystem::exists(dir / "run" / "ckpt_9.umbr"));

  std::ifstream log(dir / "run" / "loss_log.tsv");
  std::string line;
  int expected_step = 1;
  while (std::getline(log, line)) {
    std::istringstream row(line);
    int64_t step = -1;
    double loss = -1.0;
    char tab = 0;
    row >> step;
    row.get(tab);
    REQUIRE(tab == '\t');
    row >> loss;
    REQUIRE(step == expected_step);
    REQUIRE(std::isfinite(loss));
    REQUIRE(loss >= 0.0);
    ++expected_step;
  }
  REQUIRE(expected_step == 8);
}

TEST_CASE("resumed training reproduces the uninterrupted run byte for byte") {
  const DenoiserConfig cfg = toy_model();
  const auto dir = fresh_dir("resume");
  const std::string manifest = toy_manifest(dir, cfg, 3, 23);
  MelConfig mc;
  mc.n_mels = cfg.F;

  const std::string full_final =
      train(toy_train(6), cfg, mc, manifest, (dir / "full").string());

  const std::string half_final =
      train(toy_train(3), cfg, mc, manifest, (dir / "half").string());
  REQUIRE(slurp((dir / "full" / "ckpt_3.umbr").string()) == slurp(half_final));

  const std::string resumed_final =
      train(toy_train(6), cfg, mc, manifest, (dir / "half").string(), half_final);
  REQUIRE(std::filesystem::path(resumed_final).filename() == "ckpt_6.umbr");
  REQUIRE(slurp(full_final) == slurp(resumed_final));
  REQUIRE(slurp((dir / "full" / "loss_log.tsv").string()) ==
          slurp((dir / "half" / "loss_log.tsv").string()));
}

TEST_CASE("divergent training aborts with the failing step") {
  const DenoiserConfig cfg = toy_model();
  const auto dir = fresh_dir("diverge");
  const std::string manifest = toy_manifest(dir, cfg, 2, 24);
  MelConfig mc;
  mc.n_mels = cfg.F;

  TrainConfig tc = toy_train(50);
  tc.lr = 1e28;  // blows the parameters apart almost immediately
  tc.weight_decay = 0.0;
  try {
    train(tc, cfg, mc, manifest, (dir / "run").string());
    FAIL("training should have aborted");
  } catch (const std::runtime_error& e) {
    REQUIRE(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("training validates the frame budget against the model") {
  const DenoiserConfig cfg = toy_model();
  TrainConfig tc = toy_train(1);
  tc.frames_per_batch = cfg.max_N - 1;
  MelConfig mc;
  mc.n_mels = cfg.F;
  REQUIRE_THROWS_AS(train(tc, cfg, mc, "nowhere.jsonl", "out"), std::invalid_argument);
}
