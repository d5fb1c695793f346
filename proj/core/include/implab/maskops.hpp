#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "implab/mask.hpp"
#include "implab/network.hpp"
#include "implab/rng.hpp"

namespace implab {

// Bitwise negation over the full mask domain: kept and pruned sets swap.
Mask complement(const Mask& m);

// Exactly floor((1-sparsity)*n_bits) survivors chosen uniformly without
// replacement.
Mask random_mask(std::size_t n_bits, std::uint64_t layout_id, double sparsity, Rng& rng);

// Flips floor(rho*|ones|) on-bits off and floor(rho*|zeros|) off-bits on,
// each chosen uniformly (on-bits drawn first).
Mask perturb(const Mask& m, double rho, Rng& rng);

// Jaccard overlap |a AND b| / |a OR b|; defined as 1.0 when both masks are
// all-zero (a 0/0 convention, stated in the docs).
double relative_similarity(const Mask& a, const Mask& b);

// Per conv layer: which (out-channel, in-channel) k x k spatial slices are
// completely masked off.
struct KernelLayerMap {
  std::string layer;
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel = 0;         // spatial side length
  std::vector<char> zero;         // out*in grid, row-major, 1 = fully pruned
  std::size_t zero_count = 0;
};

using KernelMap = std::vector<KernelLayerMap>;

// Walks the prunable conv entries in layout order (input to output).
KernelMap zero_kernels(const Mask& mask, const ParamStore& params);

// One 8-bit PGM per layer under `dir` (bright = zero kernel, dark = alive)
// plus `zero_kernels.csv` with per-layer counts. An empty map writes
// nothing.
void heatmap_export(const KernelMap& map, const std::string& dir);

}  // namespace implab
