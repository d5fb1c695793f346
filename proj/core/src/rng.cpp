#include "implab/rng.hpp"

#include <cmath>
#include <numbers>

#include "implab/errors.hpp"

namespace implab {

namespace {

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

std::uint64_t Rng::next_u64() {
  std::uint64_t s = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
  return mix64(s);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_below(std::uint64_t n) {
  if (n == 0) throw NumericError("uniform_below: n must be positive");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
  std::uint64_t v = next_u64();
  while (v > limit) v = next_u64();
  return v % n;
}

double Rng::normal() {
  // u1 in (0,1] so log stays finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::derive(std::string_view tag, std::uint64_t n) const {
  std::uint64_t h = fnv1a64(tag);
  h = fnv1a64(&seed_, sizeof(seed_), h);
  h = fnv1a64(&n, sizeof(n), h);
  return Rng(mix64(h));
}

void Rng::restore(std::uint64_t seed, std::uint64_t counter) {
  seed_ = seed;
  counter_ = counter;
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t h) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace implab
