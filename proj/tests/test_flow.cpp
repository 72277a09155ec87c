#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "umbra/flow.hpp"

using namespace umbra;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.d = 32;
  cfg.n_blocks = 2;
  cfg.n_heads = 2;
  cfg.d_text = 16;
  cfg.F = 8;
  cfg.max_N = 96;
  return cfg;
}

TripletSample toy_triplet(const DenoiserConfig& cfg, int n, int n_env, uint64_t seed) {
  Rng rng(seed);
  MelConfig mc;
  mc.n_mels = cfg.F;
  TripletSample t;
  t.target_mel.values = random_normal(cfg.F, n, rng) * 2.0 + Mat::Constant(cfg.F, n, -5.0);
  t.target_mel.config = mc;
  t.speech_mel.values = random_normal(cfg.F, n, rng) * 2.0 + Mat::Constant(cfg.F, n, -5.0);
  t.speech_mel.config = mc;
  t.env_mel.values = random_normal(cfg.F, n_env, rng) * 2.0 + Mat::Constant(cfg.F, n_env, -6.0);
  t.env_mel.config = mc;
  t.transcript = "abc";
  t.ser = SerValue(0.4);
  t.strategy = Strategy::SYNTHETIC;
  return t;
}

}  // namespace

TEST_CASE("mask sampler validates its arguments") {
  Rng rng(1);
  REQUIRE_THROWS_AS(sample_mask(0, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_mask(10, rng, 0.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_mask(10, rng, 0.5, 0.4), std::invalid_argument);
  REQUIRE_THROWS_AS(sample_mask(10, rng, 0.5, 1.2), std::invalid_argument);
}

TEST_CASE("full-fraction mask covers everything") {
  Rng rng(2);
  const TemporalMask m = sample_mask(17, rng, 1.0, 1.0);
  REQUIRE(m.begin == 0);
  REQUIRE(m.end == 17);
  const auto f = m.flags();
  for (uint8_t b : f) REQUIRE(b == 1);
}

TEST_CASE("single frame always masks that frame") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const TemporalMask m = sample_mask(1, rng, 0.3, 1.0);
    REQUIRE(m.begin == 0);
    REQUIRE(m.end == 1);
  }
}

TEST_CASE("masks are contiguous and never empty") {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const int n = 1 + static_cast<int>(rng.uniform_int(40));
    const TemporalMask m = sample_mask(n, rng, 0.3, 1.0);
    REQUIRE(m.count() >= 1);
    const auto f = m.flags();
    int transitions = 0;
    for (int j = 1; j < n; ++j) transitions += f[j] != f[j - 1];
    REQUIRE(transitions <= 2);
  }
}

TEST_CASE("mask fraction statistics match the configured range") {
  Rng rng(5);
  const int n = 100;
  double total = 0.0;
  for (int i = 0; i < 10000; ++i) total += double(sample_mask(n, rng, 0.3, 1.0).count()) / n;
  const double mean = total / 10000.0;
  REQUIRE(mean > 0.60);
  REQUIRE(mean < 0.70);
}

TEST_CASE("flow point hits both endpoints exactly") {
  Rng rng(6);
  const Mat x0 = random_normal(5, 7, rng);
  const Mat x1 = random_normal(5, 7, rng);
  REQUIRE(flow_point(x0, x1, 0.0).x_t == x0);
  REQUIRE(flow_point(x0, x1, 1.0).x_t == x1);
  REQUIRE(flow_point(x0, x1, 0.3).u == Mat(x1 - x0));
}

TEST_CASE("flow from the origin scales the data endpoint") {
  Rng rng(7);
  const Mat x1 = random_normal(4, 6, rng);
  const Mat zero = Mat::Zero(4, 6);
  REQUIRE(flow_point(zero, x1, 0.25).x_t == Mat(0.25 * x1));
}

TEST_CASE("flow point is exactly linear under power-of-two scaling") {
  Rng rng(8);
  const Mat x0 = random_normal(3, 9, rng);
  const Mat x1 = random_normal(3, 9, rng);
  for (double t : {0.1, 0.37, 0.99}) {
    const FlowPoint base = flow_point(x0, x1, t);
    const FlowPoint scaled = flow_point(Mat(2.0 * x0), Mat(2.0 * x1), t);
    REQUIRE(scaled.x_t == Mat(2.0 * base.x_t));
    REQUIRE(scaled.u == Mat(2.0 * base.u));
  }
}

TEST_CASE("flow point rejects bad arguments") {
  const Mat a = Mat::Zero(2, 3);
  const Mat b = Mat::Zero(2, 4);
  REQUIRE_THROWS_AS(flow_point(a, b, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(flow_point(a, a, -0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(flow_point(a, a, 1.1), std::invalid_argument);
}

TEST_CASE("training draws zero the contexts when everything is masked") {
  const DenoiserConfig cfg = tiny_config();
  const TripletSample t = toy_triplet(cfg, 24, 10, 9);
  Rng rng(10);
  const TrainingDraw d = make_training_draw(t, default_vocab(), cfg, rng, 1.0, 1.0);
  REQUIRE(d.speech_ctx.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(d.env_ctx.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(d.ser == t.ser.value);
  REQUIRE(d.frames() == 24);
}

TEST_CASE("training draws always mask at least one frame") {
  const DenoiserConfig cfg = tiny_config();
  const TripletSample t = toy_triplet(cfg, 16, 5, 11);
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    const TrainingDraw d = make_training_draw(t, default_vocab(), cfg, rng);
    int masked = 0;
    for (uint8_t m : d.mask) masked += m;
    REQUIRE(masked >= 1);
    REQUIRE(d.t >= 0.0);
    REQUIRE(d.t <= 1.0);
  }
}

TEST_CASE("training draws are seed deterministic") {
  const DenoiserConfig cfg = tiny_config();
  const TripletSample t = toy_triplet(cfg, 20, 7, 13);
  Rng ra(14), rb(14);
  const TrainingDraw a = make_training_draw(t, default_vocab(), cfg, ra);
  const TrainingDraw b = make_training_draw(t, default_vocab(), cfg, rb);
  REQUIRE(a.x_t == b.x_t);
  REQUIRE(a.u_target == b.u_target);
  REQUIRE(a.mask == b.mask);
  REQUIRE(a.t == b.t);
  REQUIRE(a.tokens.ids == b.tokens.ids);
}

TEST_CASE("unmasked context frames carry the normalized stems") {
  const DenoiserConfig cfg = tiny_config();
  const TripletSample t = toy_triplet(cfg, 30, 7, 15);
  Rng rng(16);
  const TrainingDraw d = make_training_draw(t, default_vocab(), cfg, rng, 0.3, 0.5);
  const Mat speech_norm = normalize_mel(t.speech_mel.values, cfg);
  const Mat env_norm = normalize_mel(t.env_mel.values, cfg);
  bool saw_context = false;
  for (int j = 0; j < 30; ++j) {
    if (d.mask[j]) continue;
    saw_context = true;
    REQUIRE(d.speech_ctx.col(j) == speech_norm.col(j));
    REQUIRE(d.env_ctx.col(j) == env_norm.col(j % 7));
  }
  REQUIRE(saw_context);

  const auto ref_ids = tokenize(t.transcript, default_vocab());
  REQUIRE(d.tokens.char_count == static_cast<int>(ref_ids.size()));
  for (size_t i = 0; i < ref_ids.size(); ++i) REQUIRE(d.tokens.ids[i] == ref_ids[i]);
  for (int i = d.tokens.char_count; i < 30; ++i)
    REQUIRE(d.tokens.ids[i] == default_vocab().filler_id);
}

TEST_CASE("over-long triplets are rejected") {
  const DenoiserConfig cfg = tiny_config();
  const TripletSample t = toy_triplet(cfg, cfg.max_N + 1, 5, 17);
  Rng rng(18);
  REQUIRE_THROWS_AS(make_training_draw(t, default_vocab(), cfg, rng), std::invalid_argument);
}

TEST_CASE("unit velocity offset gives unit loss") {
  Rng rng(19);
  const Mat u = random_normal(6, 12, rng);
  const Mat v = u.array() + 1.0;
  std::vector<uint8_t> mask(12, 0);
  mask[2] = mask[3] = mask[7] = 1;
  REQUIRE(cfm_loss(v, u, mask) == 1.0);
}

TEST_CASE("flow loss ignores unmasked frames") {
  Rng rng(20);
  const Mat u = random_normal(4, 8, rng);
  Mat v = u;
  v.col(0).array() += 100.0;  // unmasked, must not count
  v.col(5).array() += 2.0;
  std::vector<uint8_t> mask(8, 0);
  mask[5] = 1;
  REQUIRE(cfm_loss(v, u, mask) == Catch::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("flow loss is invariant to joint frame permutation") {
  Rng rng(21);
  const int n = 10;
  Mat v = random_normal(5, n, rng);
  Mat u = random_normal(5, n, rng);
  std::vector<uint8_t> mask(n, 0);
  for (int j = 0; j < n; ++j) mask[j] = rng.bernoulli(0.5) ? 1 : 0;
  mask[4] = 1;
  const double base = cfm_loss(v, u, mask);

  std::vector<int> perm(n);
  for (int j = 0; j < n; ++j) perm[j] = (j * 3 + 1) % n;
  Mat vp(5, n), up(5, n);
  std::vector<uint8_t> mp(n);
  for (int j = 0; j < n; ++j) {
    vp.col(j) = v.col(perm[j]);
    up.col(j) = u.col(perm[j]);
    mp[j] = mask[perm[j]];
  }
  REQUIRE(cfm_loss(vp, up, mp) == Catch::Approx(base).epsilon(1e-12));
}

TEST_CASE("flow loss rejects degenerate inputs") {
  const Mat a = Mat::Zero(3, 4);
  REQUIRE_THROWS_AS(cfm_loss(a, Mat::Zero(3, 5), std::vector<uint8_t>(4, 1)),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(cfm_loss(a, a, std::vector<uint8_t>(3, 1)), std::invalid_argument);
  REQUIRE_THROWS_AS(cfm_loss(a, a, std::vector<uint8_t>(4, 0)), std::invalid_argument);
}

TEST_CASE("constant fields integrate exactly") {
  const Mat v = Mat::Constant(2, 3, -1.7);
  const Mat x0 = Mat::Constant(2, 3, 0.5);
  for (auto method : {SamplerMethod::EULER, SamplerMethod::MIDPOINT}) {
    for (int n : {1, 3, 7, 32}) {
      SamplerConfig sc{method, n};
      const Mat x1 = integrate([&](const Mat&, double) { return v; }, x0, sc);
      REQUIRE((x1 - (x0 + v)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("two Euler steps on the exponential field") {
  SamplerConfig sc{SamplerMethod::EULER, 2};
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  const Mat x1 = integrate([](const Mat& x, double) { return x; }, x0, sc);
  REQUIRE(x1(0, 0) == 2.25);
}

TEST_CASE("two midpoint steps on the exponential field") {
  SamplerConfig sc{SamplerMethod::MIDPOINT, 2};
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  const Mat x1 = integrate([](const Mat& x, double) { return x; }, x0, sc);
  REQUIRE(x1(0, 0) == 2.640625);
}

TEST_CASE("solver error shrinks at the expected order") {
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  const double truth = std::exp(1.0);
  auto field = [](const Mat& x, double) { return x; };

  auto slope_for = [&](SamplerMethod method) {
    std::vector<double> errs;
    for (int n = 2; n <= 64; n *= 2) {
      SamplerConfig sc{method, n};
      errs.push_back(std::abs(integrate(field, x0, sc)(0, 0) - truth));
    }
    double acc = 0.0;
    for (size_t i = 0; i + 1 < errs.size(); ++i) acc += std::log2(errs[i] / errs[i + 1]);
    return acc / double(errs.size() - 1);
  };

  const double euler = slope_for(SamplerMethod::EULER);
  const double midpoint = slope_for(SamplerMethod::MIDPOINT);
  REQUIRE(euler > 0.85);
  REQUIRE(euler < 1.15);
  REQUIRE(midpoint > 1.8);
  REQUIRE(midpoint < 2.2);
}

TEST_CASE("diverging fields abort the integration") {
  SamplerConfig sc{SamplerMethod::EULER, 4};
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  auto bad = [](const Mat& x, double) {
    return Mat::Constant(x.rows(), x.cols(), std::numeric_limits<double>::quiet_NaN());
  };
  REQUIRE_THROWS_AS(integrate(bad, x0, sc), std::runtime_error);
  SamplerConfig zero_steps{SamplerMethod::EULER, 0};
  REQUIRE_THROWS_AS(integrate(bad, x0, zero_steps), std::invalid_argument);
}

TEST_CASE("column tiling repeats the source cyclically") {
  Mat m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const Mat t = tile_columns(m, 7);
  REQUIRE(t.cols() == 7);
  REQUIRE(t.col(3) == m.col(0));
  REQUIRE(t.col(5) == m.col(2));
  const Mat shrunk = tile_columns(m, 2);
  REQUIRE(shrunk == m.leftCols(2));
}

TEST_CASE("synthesis produces the requested continuation") {
  const DenoiserConfig cfg = tiny_config();
  DenoiserParams p = init_denoiser(cfg, 31, 97);
  Rng noise(32);
  for (auto& [name, t] : tensor_refs(p)) *t += random_normal(t->rows(), t->cols(), noise, 0.02);

  MelConfig mc;
  mc.n_mels = cfg.F;
  Rng rng(33);
  MelSpectrogram ref;
  ref.config = mc;
  ref.values = random_normal(cfg.F, 20, rng) - Mat::Constant(cfg.F, 20, 5.0);
  MelSpectrogram env;
  env.config = mc;
  env.values = random_normal(cfg.F, 6, rng) - Mat::Constant(cfg.F, 6, 6.0);

  SamplerConfig sc{SamplerMethod::EULER, 4};
  const std::string ref_text = "hello out there";
  const std::string gen_text = "short";
  const SynthesisResult r =
      synthesize(p, cfg, ref, ref_text, env, gen_text, SerValue(0.5), sc, mc, 77);

  const int expect_n = estimate_target_length(gen_text, ref_text, 20);
  REQUIRE(r.mel.F() == cfg.F);
  REQUIRE(r.mel.N() == expect_n);
  REQUIRE(all_finite(r.mel.values));
  REQUIRE(r.wave.size() > 0);
  REQUIRE(r.wave.sample_rate == mc.sample_rate);

  const SynthesisResult again =
      synthesize(p, cfg, ref, ref_text, env, gen_text, SerValue(0.5), sc, mc, 77);
  REQUIRE(r.mel.values == again.mel.values);
  REQUIRE(r.wave.samples == again.wave.samples);

  const SynthesisResult other =
      synthesize(p, cfg, ref, ref_text, env, gen_text, SerValue(0.5), sc, mc, 78);
  REQUIRE(r.mel.values != other.mel.values);
}

TEST_CASE("synthesis refuses to overrun the frame budget") {
  const DenoiserConfig cfg = tiny_config();
  DenoiserParams p = init_denoiser(cfg, 41, 97);
  MelConfig mc;
  mc.n_mels = cfg.F;
  Rng rng(42);
  MelSpectrogram ref;
  ref.config = mc;
  ref.values = random_normal(cfg.F, 60, rng);
  MelSpectrogram env;
  env.config = mc;
  env.values = random_normal(cfg.F, 4, rng);
  SamplerConfig sc{SamplerMethod::EULER, 2};
  // continuation as long as the reference pushes 120 frames past max_N = 96
  REQUIRE_THROWS_AS(synthesize(p, cfg, ref, "abcdefgh", env, "abcdefgh", SerValue(0.2), sc,
                               mc, 1),
                    std::invalid_argument);
}
