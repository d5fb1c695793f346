#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "implab/mask.hpp"
#include "implab/rng.hpp"
#include "implab/tensor.hpp"

namespace implab {

enum class LayerKind { Conv, BatchNorm, Relu, GlobalAvgPool, Linear };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::vector<std::size_t> dims;  // kind-specific, e.g. conv {O,C,k,k}
  bool prunable = false;
};

enum class HeadKind { Classifier, Projector };

// Desk-scale residual backbone: stem conv -> `depth` residual blocks at a
// constant `width` -> global average pool -> task head. The stem and every
// head parameter stay outside the mask domain.
struct ModelConfig {
  std::size_t width = 16;
  std::size_t depth = 2;
  std::size_t in_channels = 3;
  bool use_batchnorm = true;
  HeadKind head_kind = HeadKind::Classifier;
  std::size_t head_arg = 10;  // n_classes or embed_dim

  void validate() const;  // width >= 4, depth in [2,6], head_arg >= 1
  bool operator==(const ModelConfig&) const = default;
};

struct ParamEntry {
  std::string name;
  Tensor value;
  bool prunable = false;   // belongs to the mask domain (counted in d1)
  bool trainable = true;   // updated by the optimizer (false: running stats)
  bool decay = false;      // weight decay applies
  bool is_head = false;
  std::size_t mask_offset = 0;  // global flat offset when prunable

  bool operator==(const ParamEntry&) const = default;
};

// Parameters partitioned into the prunable backbone (size d1), the
// never-pruned stem/norm parameters, and the never-pruned head (size d2).
// The entry order is fixed at build time; prunable entries concatenate, in
// order, into the canonical flat mask layout.
struct ParamStore {
  std::vector<ParamEntry> entries;
  std::uint64_t revision = 0;

  std::size_t d1() const;  // total prunable parameter count
  std::size_t d2() const;  // total head parameter count
  std::uint64_t layout_hash() const;

  ParamEntry& find(const std::string& name);
  const ParamEntry& find(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  void bump_revision() { ++revision; }

  bool operator==(const ParamStore&) const = default;
};

struct Model {
  ModelConfig config;
  std::vector<LayerSpec> layers;
  ParamStore params;
};

Model build_model(const ModelConfig& config, Rng& rng);

// Rebuilds the layer structure for a config and adopts existing parameters
// (entry names/shapes must match what build_model would produce).
Model model_with_params(const ModelConfig& config, ParamStore params);

// Replaces the head entries in place (backbone layout untouched).
void swap_head(Model& model, HeadKind kind, std::size_t head_arg, Rng& rng);
// Re-initializes the existing head in place.
void reinit_head(Model& model, Rng& rng);

enum class RunMode { Train, Eval };

struct BnStash {
  Tensor xhat;
  std::vector<double> istd;
  std::vector<double> gamma;
};

struct BlockStash {
  Tensor in;       // block input (post-relu of previous stage)
  Tensor w1, w2;   // masked conv kernels as used
  Tensor c1_out, c2_out;
  BnStash bn1, bn2;
  Tensor r1;   // post-relu mid activation
  Tensor out;  // post-relu block output
};

// Records everything backward needs. Valid only while the owning
// ParamStore is unmodified (revision check); reuse after a parameter
// update is a stale-tape error.
struct ActivationTape {
  const ParamStore* owner = nullptr;
  std::uint64_t revision = 0;
  RunMode mode = RunMode::Train;
  Tensor input;
  Tensor stem_w;
  Tensor stem_conv_out;
  BnStash stem_bn;
  Tensor stem_act;
  std::vector<BlockStash> blocks;
  Tensor feat;      // pooled features
  Tensor proj_hidden;  // projector hidden activation (post-relu)
};

// f(x; m (.) theta, gamma): every prunable weight is multiplied by its mask
// bit before use. Train mode uses batch statistics and updates the running
// estimates; eval mode is pure.
Tensor forward(Model& model, const Mask& mask, const Tensor& x, RunMode mode,
               ActivationTape* tape = nullptr);

// Gradient tensors aligned with params.entries (empty tensor for
// non-trainable entries). Gradients of masked-off coordinates are zeroed.
struct Grads {
  std::vector<Tensor> by_entry;
};

Grads backward(const Model& model, const Mask& mask, const ActivationTape& tape,
               const Tensor& output_grad);

// Returns a copy whose prunable weights are multiplied by the mask,
// bit-exactly what forward uses.
ParamStore apply_mask(const ParamStore& params, const Mask& mask);

void require_mask_matches(const ParamStore& params, const Mask& mask);

}  // namespace implab
