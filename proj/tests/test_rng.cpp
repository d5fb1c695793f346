#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "implab/rng.hpp"

using namespace implab;

TEST_CASE("same seed gives an identical stream") {
  Rng a(123);
  Rng b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds diverge") {
  Rng a(1);
  Rng b(2);
  int equal = 0;
  for (int i = 0; i < 64; ++i)
    if (a.next_u64() == b.next_u64()) ++equal;
  CHECK(equal == 0);
}

TEST_CASE("uniform stays in range") {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-3.0, 5.0);
    CHECK(u >= -3.0);
    CHECK(u < 5.0);
  }
}

TEST_CASE("uniform_below covers the full range and stays below n") {
  Rng rng(77);
  std::vector<int> seen(10, 0);
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t v = rng.uniform_below(10);
    REQUIRE(v < 10);
    ++seen[static_cast<std::size_t>(v)];
  }
  for (int count : seen) CHECK(count > 0);
}

TEST_CASE("normal has roughly standard moments") {
  Rng rng(2024);
  const int n = 200000;
  double sum = 0.0;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    ss += v * v;
  }
  const double m = sum / n;
  const double var = ss / n - m * m;
  CHECK(std::fabs(m) < 0.02);
  CHECK(std::fabs(var - 1.0) < 0.02);
}

TEST_CASE("state restore replays the stream") {
  Rng rng(5);
  (void)rng.next_u64();
  (void)rng.next_u64();
  const std::uint64_t seed = rng.seed();
  const std::uint64_t counter = rng.counter();
  const std::uint64_t next = rng.next_u64();

  Rng other(0);
  other.restore(seed, counter);
  CHECK(other.next_u64() == next);
}

TEST_CASE("derived streams are deterministic and independent") {
  Rng root(99);
  Rng a1 = root.derive("shuffle");
  Rng a2 = root.derive("shuffle");
  Rng b = root.derive("augment");
  Rng c = root.derive("shuffle", 1);

  CHECK(a1.next_u64() == a2.next_u64());

  Rng a3 = root.derive("shuffle");
  int same_ab = 0;
  int same_ac = 0;
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t va = a3.next_u64();
    if (va == b.next_u64()) ++same_ab;
    if (va == c.next_u64()) ++same_ac;
  }
  CHECK(same_ab == 0);
  CHECK(same_ac == 0);

  // Deriving does not advance the parent.
  Rng fresh(99);
  (void)fresh.derive("anything");
  Rng fresh2(99);
  CHECK(fresh.next_u64() == fresh2.next_u64());
}

TEST_CASE("fnv1a64 matches known reference digests") {
  // Standard FNV-1a test vectors.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}
