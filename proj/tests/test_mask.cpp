#include <doctest.h>

#include <cstdint>
#include <vector>

#include "implab/errors.hpp"
#include "implab/mask.hpp"

using namespace implab;

TEST_CASE("factories, popcount, sparsity") {
  const Mask ones = Mask::ones(70, 0xabc);
  CHECK(ones.size() == 70);
  CHECK(ones.popcount() == 70);
  CHECK(ones.sparsity() == 0.0);

  const Mask zeros = Mask::zeros(70, 0xabc);
  CHECK(zeros.popcount() == 0);
  CHECK(zeros.sparsity() == 1.0);

  Mask m = Mask::zeros(10, 1);
  m.set(0, true);
  m.set(9, true);
  CHECK(m.popcount() == 2);
  CHECK(m.get(0));
  CHECK(!m.get(1));
  CHECK(m.get(9));
  CHECK(m.sparsity() == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("ones mask keeps trailing bits clear") {
  // 70 bits -> word 2 has only 6 live bits; the rest must be zero so
  // popcount and equality work on raw words.
  const Mask m = Mask::ones(70, 0);
  REQUIRE(m.words().size() == 2);
  CHECK(m.words()[1] == 0x3full);
}

TEST_CASE("and/or popcounts and hamming distance") {
  Mask a = Mask::zeros(8, 7);
  Mask b = Mask::zeros(8, 7);
  // a = 1100'0000, b = 1010'0000 (bit 0 first)
  a.set(0, true);
  a.set(1, true);
  b.set(0, true);
  b.set(2, true);
  CHECK(and_popcount(a, b) == 1);
  CHECK(or_popcount(a, b) == 3);
  CHECK(hamming_distance(a, b) == 2);
}

TEST_CASE("layout mismatch is rejected") {
  const Mask a = Mask::ones(8, 1);
  const Mask b = Mask::ones(8, 2);
  const Mask c = Mask::ones(9, 1);
  CHECK_THROWS_AS(and_popcount(a, b), DimensionError);
  CHECK_THROWS_AS(hamming_distance(a, c), DimensionError);
}

TEST_CASE("set_words validates count and canonical form") {
  Mask m = Mask::zeros(70, 3);
  std::vector<std::uint64_t> words(2, 0);
  words[0] = 0xffull;
  CHECK_NOTHROW(m.set_words(words));
  CHECK(m.popcount() == 8);

  CHECK_THROWS_AS(m.set_words(std::vector<std::uint64_t>(1, 0)), DimensionError);

  std::vector<std::uint64_t> dirty(2, 0);
  dirty[1] = std::uint64_t{1} << 6;  // bit 70: beyond size
  CHECK_THROWS_AS(m.set_words(dirty), DimensionError);
}

TEST_CASE("equality covers size, layout, and bits") {
  Mask a = Mask::ones(16, 5);
  Mask b = Mask::ones(16, 5);
  CHECK(a == b);
  b.set(3, false);
  CHECK(!(a == b));
  const Mask c = Mask::ones(16, 6);
  CHECK(!(a == c));
}
