#pragma once

#include <cstdint>

namespace kvlab {

// splitmix64. Used everywhere instead of <random> so that sampled streams are
// bit-identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in the open interval (0,1); 53-bit resolution offset by half an
  // ulp so neither endpoint can occur.
  double uniform01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  // Unbiased integer in [0, n) via rejection.
  uint64_t below(uint64_t n) {
    const uint64_t limit = n * ((~uint64_t{0}) / n);
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  int range(int lo, int hi_exclusive) {
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi_exclusive - lo)));
  }

 private:
  uint64_t state_;
};

// Stream derivation: hash a seed with a path of tags so that independent
// consumers never share a stream.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

}  // namespace kvlab
