#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace vividforge {

// splitmix64: tiny, fast, and identical on every platform.
inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named streams: rng(seed, "encoder.w1") and rng(seed, "encoder.w2") are
// decorrelated and insertion-order independent.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) { (void)splitmix64_next(state_); }
  Rng(uint64_t seed, std::string_view name) : state_(seed ^ fnv1a64(name)) {
    (void)splitmix64_next(state_);
  }

  uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
  }

  // Box-Muller, one fresh pair of draws per call (no cached spare, so the
  // stream position is a pure function of the call count).
  double next_gaussian() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Unbiased-enough integer in [0, n) via 128-bit multiply.
  uint64_t next_below(uint64_t n) {
    return uint64_t((static_cast<__uint128_t>(next_u64()) *
                     static_cast<__uint128_t>(n)) >>
                    64);
  }

 private:
  uint64_t state_;
};

}  // namespace vividforge
