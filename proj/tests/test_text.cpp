#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "umbra/text.hpp"

using namespace umbra;

TEST_CASE("tokenization looks up character ids") {
  const CharVocab v = default_vocab();
  const auto ids = tokenize("ab", v);
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == v.char_to_id.at('a'));
  CHECK(ids[1] == v.char_to_id.at('b'));

  const auto with_space = tokenize("a a", v);
  REQUIRE(with_space.size() == 3);
  CHECK(with_space[1] == v.char_to_id.at(' '));

  CHECK_THROWS_AS(tokenize("", v), std::invalid_argument);
}

TEST_CASE("unmapped characters fall back to the unknown id") {
  const CharVocab v = default_vocab();
  const auto ids = tokenize("a\tb", v);
  REQUIRE(ids.size() == 3);
  CHECK(ids[1] == v.unk_id);
}

TEST_CASE("filler extension pads to the requested length") {
  const CharVocab v = default_vocab();
  const std::vector<int> ids = {5, 6, 7};
  const ExtendedTokens z = extend_with_filler(ids, 5, v);
  REQUIRE(z.N() == 5);
  CHECK(z.char_count == 3);
  CHECK(z.ids[0] == 5);
  CHECK(z.ids[2] == 7);
  CHECK(z.ids[3] == v.filler_id);
  CHECK(z.ids[4] == v.filler_id);

  const ExtendedTokens exact = extend_with_filler({1, 2, 3, 4, 5}, 5, v);
  CHECK(exact.char_count == 5);
  CHECK(std::count(exact.ids.begin(), exact.ids.end(), v.filler_id) == 0);

  CHECK_THROWS_AS(extend_with_filler({1, 2, 3, 4, 5, 6}, 5, v), std::invalid_argument);
}

TEST_CASE("non-filler count always recovers the character count") {
  const CharVocab v = default_vocab();
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(64));
    const int s = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n) + 1));
    std::vector<int> ids(s);
    for (int& id : ids) id = static_cast<int>(rng.uniform_int(95));  // character ids only
    const ExtendedTokens z = extend_with_filler(ids, n, v);
    const auto non_filler =
        std::count_if(z.ids.begin(), z.ids.end(), [&](int i) { return i != v.filler_id; });
    CHECK(non_filler == s);
  }
}

TEST_CASE("duration estimate follows the character-length ratio") {
  CHECK(estimate_target_length(std::string(20, 'x'), std::string(10, 'y'), 100) == 200);
  CHECK(estimate_target_length("abcd", "wxyz", 73) == 73);
  CHECK(estimate_target_length("a", "abc", 100) == 34);
  CHECK_THROWS_AS(estimate_target_length("", "abc", 10), std::invalid_argument);
  CHECK_THROWS_AS(estimate_target_length("abc", "", 10), std::invalid_argument);
  CHECK_THROWS_AS(estimate_target_length("abc", "abc", 0), std::invalid_argument);

  int prev = 0;
  for (int s_gen = 1; s_gen <= 40; ++s_gen) {
    const int n = estimate_target_length(std::string(s_gen, 'a'), "abcdefg", 50);
    CHECK(n >= prev);
    prev = n;
  }
}

TEST_CASE("embedding constant input gives constant interior columns") {
  const CharVocab v = default_vocab();
  Rng rng(5);
  const TextEmbedderParams p = init_text_embedder(v.size, 16, 2, rng);
  const ExtendedTokens z = extend_with_filler({}, 24, v);
  const Mat out = embed_text(z, p);
  REQUIRE(out.rows() == 16);
  REQUIRE(out.cols() == 24);
  const int r = receptive_field(p);
  for (int j = r + 1; j + r + 1 < 24; ++j)
    CHECK((out.col(j) - out.col(r)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a single-position change only affects nearby columns") {
  const CharVocab v = default_vocab();
  Rng rng(6);
  const TextEmbedderParams p = init_text_embedder(v.size, 12, 2, rng);
  const int n = 40, k = 17;
  std::vector<int> a(n), b;
  Rng ids_rng(7);
  for (int& id : a) id = static_cast<int>(ids_rng.uniform_int(95));
  b = a;
  b[k] = (a[k] + 1) % 95;

  const Mat out_a = embed_text(extend_with_filler(a, n, v), p);
  const Mat out_b = embed_text(extend_with_filler(b, n, v), p);
  const int r = receptive_field(p);
  for (int j = 0; j < n; ++j) {
    const double diff = (out_a.col(j) - out_b.col(j)).cwiseAbs().maxCoeff();
    if (j < k - r || j > k + r)
      CHECK(diff == 0.0);
  }
  CHECK((out_a.col(k) - out_b.col(k)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("single token embeds to a single column") {
  const CharVocab v = default_vocab();
  Rng rng(8);
  const TextEmbedderParams p = init_text_embedder(v.size, 8, 2, rng);
  const Mat out = embed_text(extend_with_filler({3}, 1, v), p);
  CHECK(out.rows() == 8);
  CHECK(out.cols() == 1);
}

TEST_CASE("embedding is deterministic") {
  const CharVocab v = default_vocab();
  Rng rng(9);
  const TextEmbedderParams p = init_text_embedder(v.size, 8, 2, rng);
  const ExtendedTokens z = extend_with_filler(tokenize("hello world", v), 20, v);
  const Mat a = embed_text(z, p);
  const Mat b = embed_text(z, p);
  CHECK(a == b);
}

TEST_CASE("embedding rejects out-of-range ids") {
  const CharVocab v = default_vocab();
  Rng rng(10);
  const TextEmbedderParams p = init_text_embedder(v.size, 8, 1, rng);
  ExtendedTokens z;
  z.ids = {0, v.size};  // one past the end
  z.char_count = 2;
  CHECK_THROWS_AS(embed_text(z, p), std::invalid_argument);
}

TEST_CASE("embedder analytic gradients match finite differences") {
  const int vocab = 12, d = 6, n = 9, blocks = 2;
  Rng rng(31337);
  TextEmbedderParams p = init_text_embedder(vocab, d, blocks, rng);
  // perturb the zero-initialized tensors so their gradients are exercised
  for (auto& [name, t] : text_tensor_refs(p, "")) {
    if (t->cwiseAbs().maxCoeff() == 0.0) *t = random_normal(t->rows(), t->cols(), rng, 0.3);
  }

  ExtendedTokens z;
  z.char_count = n;
  z.ids.resize(n);
  for (int j = 0; j < n; ++j) z.ids[j] = static_cast<int>(rng.uniform_int(vocab));

  const Mat probe = random_normal(d, n, rng, 1.0);
  auto loss_fn = [&](TextEmbedderParams& params) {
    return (embed_text(z, params).cwiseProduct(probe)).sum();
  };

  TextForwardCache cache;
  embed_text(z, p, &cache);
  TextEmbedderParams grads = zero_like(p);
  embed_text_backward(p, cache, probe, grads);

  const double h = 1e-5;
  auto g_refs = text_tensor_refs(grads, "");
  auto p_refs = text_tensor_refs(p, "");
  for (size_t ti = 0; ti < p_refs.size(); ++ti) {
    Mat& tensor = *p_refs[ti].second;
    const Mat& analytic = *g_refs[ti].second;
    Rng pick(derive_seed(99, ti));
    const int samples = std::min<int>(6, static_cast<int>(tensor.size()));
    for (int s = 0; s < samples; ++s) {
      const int idx = static_cast<int>(pick.uniform_int(static_cast<uint64_t>(tensor.size())));
      const int r = idx % static_cast<int>(tensor.rows());
      const int c = idx / static_cast<int>(tensor.rows());
      const double orig = tensor(r, c);
      tensor(r, c) = orig + h;
      const double up = loss_fn(p);
      tensor(r, c) = orig - h;
      const double down = loss_fn(p);
      tensor(r, c) = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic(r, c);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      INFO(p_refs[ti].first << " entry (" << r << "," << c << ")");
      CHECK(rel < 1e-5);
    }
  }
}

TEST_CASE("vocabulary file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "umbra_vocab.txt";
  const CharVocab v = default_vocab();
  save_vocab(path.string(), v);
  const CharVocab r = load_vocab(path.string());
  CHECK(r.size == v.size);
  CHECK(r.filler_id == v.filler_id);
  CHECK(r.unk_id == v.unk_id);
  CHECK(r.char_to_id == v.char_to_id);
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary loader rejects malformed files") {
  const auto path = std::filesystem::temp_directory_path() / "umbra_vocab_bad.txt";
  {
    std::ofstream os(path);
    os << "not a header\n";
  }
  CHECK_THROWS_AS(load_vocab(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}
