#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace iqa {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// mt19937_64 with hand-rolled transforms; std:: distributions are
// implementation-defined, and every byte-level output here must be a pure
// function of the seed.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }

  // Independent stream derived from this rng's seed and a stream id.
  Rng fork(uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x51ed2700a1b2c3d4ull)));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n >= 1.
  int64_t next_index(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one fresh value per call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename Seq>
  void shuffle(Seq& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = next_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace iqa
