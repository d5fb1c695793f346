#pragma once

#include <cstdint>
#include <string_view>

namespace implab {

// Counter-based pseudo random generator (splitmix64 over an incrementing
// state). The raw u64 stream is a pure function of the seed and the number
// of draws, so it is identical on every platform and trivially
// serializable: (seed, counter) is the whole state.
//
// Floating point helpers go through libm only for normal(); the integer
// stream itself never does.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Unbiased uniform integer in [0, n), n > 0. Rejection sampling.
  std::uint64_t uniform_below(std::uint64_t n);
  // Standard normal via Box-Muller. Two uniforms per draw, no spare cached,
  // so the state stays a plain counter.
  double normal();

  // Derive an independent deterministic stream, e.g. rng.derive("shuffle", 3).
  Rng derive(std::string_view tag, std::uint64_t n = 0) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void restore(std::uint64_t seed, std::uint64_t counter);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

// 64-bit FNV-1a, used for layout hashes and stream derivation.
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t h = 14695981039346656037ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 14695981039346656037ull);

}  // namespace implab
