#pragma once

#include <cmath>
#include <cstdint>

namespace voxmatch::core {

// splitmix64. Chosen over std::mt19937 so that streams are identical
// across standard libraries and cheap to fork per scene / per draw.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed = 0) : state(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Box-Muller, one value per call (the pair's second half is dropped to
  // keep the stream position independent of call parity).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent stream for a labelled substream of this generator.
  Rng fork(std::uint64_t tag) {
    return Rng(next_u64() ^ (tag * 0x9E3779B97F4A7C15ull));
  }
};

// Stateless hash for procedural noise: same value for the same cell
// regardless of evaluation order.
inline std::uint64_t hash_u64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return hash_u64(a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2)));
}

}  // namespace voxmatch::core
