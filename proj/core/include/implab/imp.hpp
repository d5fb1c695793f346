#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "implab/mask.hpp"
#include "implab/network.hpp"
#include "implab/store.hpp"
#include "implab/tasks.hpp"
#include "implab/training.hpp"

namespace implab {

// Geometric sparsity schedule: level(k) = 1 - (1-p)^k of the prunable
// weights removed after k rounds.
struct SparsityLadder {
  std::size_t rounds = 18;
  double prune_fraction = 0.2;

  double level(std::size_t k) const;
  // Surviving-weight target after k rounds on d1 weights: ceil(d1*(1-p)^k).
  // Re-deriving the target from the ladder each round keeps the realized
  // sparsity within 1/d1 of the ideal level; chaining per-round floors
  // would let rounding drift accumulate.
  std::size_t survivors_at(std::size_t k, std::size_t d1) const;
};

double sparsity_at_round(std::size_t k, double p = 0.2);

// Turns off the floor(fraction*|survivors|) currently-on bits with the
// globally smallest trained |weight|; ties broken by ascending flat mask
// index. The input mask is not modified.
Mask global_magnitude_prune(const ParamStore& params, const Mask& mask, double fraction);

// Same criterion, but prunes down to an explicit survivor count.
Mask prune_to_survivors(const ParamStore& params, const Mask& mask,
                        std::size_t target_survivors);

enum class RewindMode { Pretrained, Random, Early };

std::string rewind_mode_name(RewindMode mode);
RewindMode rewind_mode_from(const std::string& name);

struct RewindSpec {
  RewindMode mode = RewindMode::Pretrained;
  std::string source_path;  // checkpoint file holding the rewind target
  double r_percent = 5.0;   // early mode: percent of pre-training

  void validate() const;
};

// Epoch whose end-of-epoch checkpoint serves as the early-rewind point:
// clamp(ceil(r/100 * epochs), 1, epochs), counted from 1.
std::size_t early_rewind_epoch(double r_percent, std::size_t epochs);

// Replaces every non-head parameter (weights, norm scale/shift, and running
// statistics — the statistics travel with theta) with the source values,
// re-initializes the head from head_rng, and re-applies the mask. Entry
// names and shapes must line up.
void rewind(Model& model, const ParamStore& source, const Mask& mask, Rng& head_rng);

struct ImpRoundResult {
  std::size_t round = 0;
  Mask mask;
  double sparsity = 0.0;
  double trained_metric = 0.0;  // metric of the trained net this round, pre-prune
  std::string mask_path;        // written files ("" when out_dir empty)
  std::string ckpt_path;
};

struct ImpOptions {
  std::size_t rounds = 5;
  double prune_fraction = 0.2;
  ParamStore rewind_source;  // values restored after each prune
  std::string out_dir;       // per-round mask/checkpoint files; "" = keep in memory
  std::string tag = "imp";
};

// Algorithm: repeat {train t epochs; prune to the ladder target; rewind}.
// Starts from `initial` (its mask is the round-0 mask, normally all-ones).
// On divergence the completed rounds are returned.
std::vector<ImpRoundResult> imp_run(const Checkpoint& initial, const TaskSpec& task,
                                    const TrainConfig& train_config, const ImpOptions& opts,
                                    std::ostream* progress = nullptr);

}  // namespace implab
