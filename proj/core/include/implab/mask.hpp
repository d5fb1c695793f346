#pragma once

#include <cstdint>
#include <vector>

namespace implab {

// Binary pruning mask over the prunable backbone parameters, packed 64 bits
// per word. layout_id binds the mask to a parameter layout; every consumer
// checks it before indexing.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t n_bits, std::uint64_t layout_id, bool fill_ones);

  static Mask ones(std::size_t n_bits, std::uint64_t layout_id) {
    return Mask(n_bits, layout_id, true);
  }
  static Mask zeros(std::size_t n_bits, std::uint64_t layout_id) {
    return Mask(n_bits, layout_id, false);
  }

  std::size_t size() const { return n_bits_; }
  std::uint64_t layout_id() const { return layout_id_; }

  bool get(std::size_t i) const {
    return (words_[i >> 6] >> (i & 63)) & 1u;
  }
  void set(std::size_t i, bool v) {
    if (v)
      words_[i >> 6] |= std::uint64_t{1} << (i & 63);
    else
      words_[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
  }

  std::size_t popcount() const;
  // Fraction of bits that are off: 1 - popcount/size.
  double sparsity() const;

  const std::vector<std::uint64_t>& words() const { return words_; }
  // Replaces the packed words wholesale (deserialization); the count must
  // match and bits beyond size() must be zero (canonical form).
  void set_words(std::vector<std::uint64_t> words);

  bool operator==(const Mask& other) const = default;

 private:
  std::size_t n_bits_ = 0;
  std::uint64_t layout_id_ = 0;
  std::vector<std::uint64_t> words_;
};

// Popcounts of pairwise combinations; operands must share layout and size.
std::size_t and_popcount(const Mask& a, const Mask& b);
std::size_t or_popcount(const Mask& a, const Mask& b);
std::size_t hamming_distance(const Mask& a, const Mask& b);

void require_same_layout(const Mask& a, const Mask& b);

}  // namespace implab
