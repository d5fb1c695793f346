#include "implab/maskops.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "implab/errors.hpp"
#include "implab/store.hpp"

namespace implab {

Mask complement(const Mask& m) {
  Mask out = Mask::zeros(m.size(), m.layout_id());
  for (std::size_t i = 0; i < m.size(); ++i) out.set(i, !m.get(i));
  return out;
}

Mask random_mask(std::size_t n_bits, std::uint64_t layout_id, double sparsity, Rng& rng) {
  if (sparsity < 0.0 || sparsity > 1.0) throw ConfigError("sparsity must be in [0, 1]");
  if (n_bits == 0) throw ConfigError("mask needs at least one bit");
  const auto survivors = static_cast<std::size_t>(
      std::floor((1.0 - sparsity) * static_cast<double>(n_bits)));
  std::vector<std::size_t> idx(n_bits);
  for (std::size_t i = 0; i < n_bits; ++i) idx[i] = i;
  Mask out = Mask::zeros(n_bits, layout_id);
  // Partial Fisher-Yates: the first `survivors` slots are a uniform sample
  // without replacement.
  for (std::size_t i = 0; i < survivors; ++i) {
    const std::size_t j = i + rng.uniform_below(n_bits - i);
    std::swap(idx[i], idx[j]);
    out.set(idx[i], true);
  }
  return out;
}

Mask perturb(const Mask& m, double rho, Rng& rng) {
  if (rho < 0.0 || rho >= 1.0) throw ConfigError("flip fraction must be in [0, 1)");
  Mask out = m;
  if (rho == 0.0) return out;
  std::vector<std::size_t> ones, zeros;
  ones.reserve(m.popcount());
  zeros.reserve(m.size() - m.popcount());
  for (std::size_t i = 0; i < m.size(); ++i) (m.get(i) ? ones : zeros).push_back(i);
  const auto n_off = static_cast<std::size_t>(std::floor(rho * static_cast<double>(ones.size())));
  const auto n_on = static_cast<std::size_t>(std::floor(rho * static_cast<double>(zeros.size())));
  for (std::size_t i = 0; i < n_off; ++i) {
    const std::size_t j = i + rng.uniform_below(ones.size() - i);
    std::swap(ones[i], ones[j]);
    out.set(ones[i], false);
  }
  for (std::size_t i = 0; i < n_on; ++i) {
    const std::size_t j = i + rng.uniform_below(zeros.size() - i);
    std::swap(zeros[i], zeros[j]);
    out.set(zeros[i], true);
  }
  return out;
}

double relative_similarity(const Mask& a, const Mask& b) {
  require_same_layout(a, b);
  const std::size_t unions = or_popcount(a, b);
  if (unions == 0) return 1.0;  // both empty: identical by convention
  return static_cast<double>(and_popcount(a, b)) / static_cast<double>(unions);
}

KernelMap zero_kernels(const Mask& mask, const ParamStore& params) {
  require_mask_matches(params, mask);
  KernelMap map;
  for (const auto& e : params.entries) {
    if (!e.prunable || e.value.shape.size() != 4) continue;
    KernelLayerMap layer;
    layer.layer = e.name;
    layer.out_channels = e.value.shape[0];
    layer.in_channels = e.value.shape[1];
    layer.kernel = e.value.shape[2];
    const std::size_t slice = e.value.shape[2] * e.value.shape[3];
    layer.zero.assign(layer.out_channels * layer.in_channels, 0);
    for (std::size_t o = 0; o < layer.out_channels; ++o)
      for (std::size_t c = 0; c < layer.in_channels; ++c) {
        const std::size_t base = e.mask_offset + (o * layer.in_channels + c) * slice;
        bool all_off = true;
        for (std::size_t k = 0; k < slice && all_off; ++k)
          if (mask.get(base + k)) all_off = false;
        if (all_off) {
          layer.zero[o * layer.in_channels + c] = 1;
          ++layer.zero_count;
        }
      }
    map.push_back(std::move(layer));
  }
  return map;
}

namespace {

// Block index parsed from names like "block3.conv1.weight"; -1 otherwise.
int block_of(const std::string& layer) {
  if (layer.rfind("block", 0) != 0) return -1;
  std::size_t i = 5, v = 0;
  bool any = false;
  while (i < layer.size() && layer[i] >= '0' && layer[i] <= '9') {
    v = v * 10 + static_cast<std::size_t>(layer[i] - '0');
    ++i;
    any = true;
  }
  return any ? static_cast<int>(v) : -1;
}

}  // namespace

void heatmap_export(const KernelMap& map, const std::string& dir) {
  if (map.empty()) return;
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << "layer,block,out_ch,in_ch_total,zero_kernels\n";
  for (const auto& layer : map) {
    std::string pgm = "P5\n" + std::to_string(layer.in_channels) + " " +
                      std::to_string(layer.out_channels) + "\n255\n";
    for (char z : layer.zero) pgm.push_back(z ? static_cast<char>(255) : 0);
    write_file_atomic(dir + "/" + layer.layer + ".pgm", pgm);
    csv << layer.layer << ',' << block_of(layer.layer) << ',' << layer.out_channels << ','
        << layer.in_channels << ',' << layer.zero_count << '\n';
  }
  write_file_atomic(dir + "/zero_kernels.csv", csv.str());
}

}  // namespace implab
