#pragma once

#include <cmath>
#include <cstdint>

namespace kag {

// splitmix64; substreams are derived by mixing tags into the master seed so
// per-sample generation is reproducible without a global draw order.
struct SplitMix64 {
  uint64_t state = 0;

  explicit SplitMix64(uint64_t seed = 0) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive integer range
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next() % static_cast<uint64_t>(hi - lo + 1));
  }

  // Box-Muller, one value per call (the pair's second half is discarded so
  // draw order stays trivially deterministic)
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }
};

// Derives an independent substream seed from a master seed and tags.
inline uint64_t mix_seed(uint64_t master, uint64_t tag_a, uint64_t tag_b = 0) {
  SplitMix64 m(master ^ (tag_a * 0x9e3779b97f4a7c15ull) ^ (tag_b * 0xd1b54a32d192ed03ull));
  m.next();
  return m.next();
}

}  // namespace kag
