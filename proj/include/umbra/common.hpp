#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace umbra {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline constexpr double kPi = 3.14159265358979323846;

// splitmix64; used to derive independent sub-stream seeds from a master seed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ (0x5851f42d4c957f2dULL + stream)) ^ index);
}

// Seeded generator with portable uniform/normal draws (Box-Muller on top of
// the engine's raw bits, so results do not depend on libstdc++ distribution
// internals).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // [0, n)
  size_t uniform_int(size_t n) {
    require(n > 0, "uniform_int: n must be positive");
    const unsigned __int128 m = static_cast<unsigned __int128>(eng_()) * n;
    return static_cast<size_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Mat random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
  return m;
}

inline Mat random_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo, double hi) {
  Mat m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(lo, hi);
  return m;
}

// Rounds every entry to the nearest float32. Optimizer state lives on this
// grid so that f32 checkpoints round-trip bit-exactly.
inline void quantize_f32(Mat& m) {
  double* p = m.data();
  const Eigen::Index n = m.size();
  for (Eigen::Index i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace umbra
