#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bsdg/common.hpp"

namespace bsdg {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Stateless mixing of a seed with stream tags, used to derive child streams.
// Children with different tags are decorrelated; the parent is never advanced.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ull + (tag << 1));
  splitmix64(s);
  std::uint64_t r = splitmix64(s);
  return r;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

// Deterministic splittable random stream. Value type: copies replay the
// same sequence, which the trainer relies on for common-random-number
// evaluations of the same loss at nearby parameter points.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed) : state_(mix_seed(seed, 0x5eedULL)) {}

  // Child stream keyed by tags; does not advance this stream.
  RngStream derive(std::uint64_t a) const {
    RngStream c;
    c.state_ = mix_seed(state_, a);
    return c;
  }
  RngStream derive(std::uint64_t a, std::uint64_t b) const {
    RngStream c;
    c.state_ = mix_seed(state_, a, b);
    return c;
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0,1), 53 usable bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Unbiased enough for shuffling desk-scale datasets; uses the high bits.
  std::uint64_t uniform_index(std::uint64_t n) {
    detail::require(n > 0, "uniform_index: n must be positive");
    return static_cast<std::uint64_t>(next_double() * static_cast<double>(n)) % n;
  }

  // Box-Muller, no cached spare so the consumption pattern stays predictable.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      auto j = uniform_index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_ = 0x853c49e6748fea9bull;
};

// Well-known tags for the stream tree rooted at the run seed.
namespace stream_tag {
constexpr std::uint64_t init = 1;       // parameter initialization
constexpr std::uint64_t shuffle = 2;    // epoch shuffling
constexpr std::uint64_t inner = 3;      // adversarial probes in the inner loss
constexpr std::uint64_t surrogate = 4;  // surrogate pipeline sampling
constexpr std::uint64_t data = 5;       // synthetic dataset generation
constexpr std::uint64_t eval = 6;       // held-out domain materialization
}  // namespace stream_tag

}  // namespace bsdg
