#pragma once

#include <cstdint>
#include <random>

namespace jepolab {

// Deterministic random stream. std::mt19937_64 has a fully specified output
// sequence, so runs reproduce bit-identically across platforms as long as no
// std::*_distribution (whose algorithms are implementation-defined) is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // splitmix64 finalizer, used to decorrelate derived stream seeds.
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Independent stream keyed by (seed, a, b), e.g. (global seed, step, prompt).
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return Rng(mix(mix(mix(seed) ^ a) ^ b));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), rejection sampled.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~0ull - ~0ull % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace jepolab
