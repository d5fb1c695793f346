#pragma once

#include <cstdint>
#include <string>

#include "implab/mask.hpp"
#include "implab/network.hpp"
#include "implab/training.hpp"

namespace implab {

// Everything needed to resume or rewind a run. Serialized little-endian
// with a leading magic/version and a trailing CRC over the payload; the
// payload carries no timestamps, so identical state produces identical
// bytes. Creation time lives in a human-readable sidecar JSON instead.
struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  Mask mask;
  OptState opt;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::uint64_t round = 0;
  std::uint64_t epoch = 0;
  std::string task_id;
  std::string parent_id;

  bool operator==(const Checkpoint&) const = default;
};

// Binary checkpoint ("LTCK", version 1) plus `<path>.json` sidecar with
// lineage metadata. Writes are atomic (temp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Compact mask file ("LTMK", version 1): d1, layout hash, popcount, packed
// bits, CRC. The stored popcount must match the bits on load.
void save_mask(const Mask& mask, const std::string& path);
Mask load_mask(const std::string& path);

// Atomic small-file write used by all writers in this module.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace implab
