#include "implab/mask.hpp"

#include <bit>

#include "implab/errors.hpp"

namespace implab {

Mask::Mask(std::size_t n_bits, std::uint64_t layout_id, bool fill_ones)
    : n_bits_(n_bits), layout_id_(layout_id), words_((n_bits + 63) / 64, 0) {
  if (fill_ones) {
    for (auto& w : words_) w = ~std::uint64_t{0};
    // Trailing bits beyond n_bits stay zero so popcounts and serialized
    // words are canonical.
    if (n_bits % 64 != 0 && !words_.empty()) {
      words_.back() = (std::uint64_t{1} << (n_bits % 64)) - 1;
    }
  }
}

std::size_t Mask::popcount() const {
  std::size_t n = 0;
  for (std::uint64_t w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

double Mask::sparsity() const {
  if (n_bits_ == 0) return 0.0;
  return 1.0 - static_cast<double>(popcount()) / static_cast<double>(n_bits_);
}

void Mask::set_words(std::vector<std::uint64_t> words) {
  if (words.size() != words_.size())
    throw DimensionError("mask: expected " + std::to_string(words_.size()) +
                         " packed words, got " + std::to_string(words.size()));
  if (n_bits_ % 64 != 0 && !words.empty()) {
    const std::uint64_t live = (std::uint64_t{1} << (n_bits_ % 64)) - 1;
    if ((words.back() & ~live) != 0)
      throw DimensionError("mask: nonzero bits beyond the declared length");
  }
  words_ = std::move(words);
}

void require_same_layout(const Mask& a, const Mask& b) {
  if (a.size() != b.size() || a.layout_id() != b.layout_id()) {
    throw DimensionError("mask: layout mismatch");
  }
}

std::size_t and_popcount(const Mask& a, const Mask& b) {
  require_same_layout(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.words().size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(a.words()[i] & b.words()[i]));
  }
  return n;
}

std::size_t or_popcount(const Mask& a, const Mask& b) {
  require_same_layout(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.words().size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(a.words()[i] | b.words()[i]));
  }
  return n;
}

std::size_t hamming_distance(const Mask& a, const Mask& b) {
  require_same_layout(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.words().size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(a.words()[i] ^ b.words()[i]));
  }
  return n;
}

}  // namespace implab
