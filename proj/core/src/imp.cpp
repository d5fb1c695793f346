#include "implab/imp.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "implab/errors.hpp"

namespace implab {

double SparsityLadder::level(std::size_t k) const {
  return sparsity_at_round(k, prune_fraction);
}

std::size_t SparsityLadder::survivors_at(std::size_t k, std::size_t d1) const {
  const double keep = std::pow(1.0 - prune_fraction, static_cast<double>(k));
  return static_cast<std::size_t>(std::ceil(keep * static_cast<double>(d1) - 1e-9));
}

double sparsity_at_round(std::size_t k, double p) {
  if (p <= 0.0 || p >= 1.0) throw ConfigError("per-round prune fraction must be in (0, 1)");
  return 1.0 - std::pow(1.0 - p, static_cast<double>(k));
}

namespace {

// Flat (|weight|, index) view of the surviving coordinates.
struct Survivor {
  double magnitude;
  std::size_t index;
};

std::vector<Survivor> surviving_weights(const ParamStore& params, const Mask& mask) {
  std::vector<Survivor> out;
  out.reserve(mask.popcount());
  for (const auto& e : params.entries) {
    if (!e.prunable) continue;
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const std::size_t idx = e.mask_offset + k;
      if (mask.get(idx)) out.push_back({std::abs(e.value.data[k]), idx});
    }
  }
  return out;
}

Mask remove_smallest(const ParamStore& params, const Mask& mask, std::size_t n_remove) {
  std::vector<Survivor> alive = surviving_weights(params, mask);
  if (alive.empty()) throw NumericError("no surviving weights left to prune");
  if (n_remove > alive.size())
    throw ConfigError("asked to remove " + std::to_string(n_remove) + " of " +
                      std::to_string(alive.size()) + " survivors");
  Mask out = mask;
  if (n_remove == 0) return out;
  // Global smallest-magnitude criterion, ties by ascending flat index.
  std::nth_element(alive.begin(), alive.begin() + static_cast<std::ptrdiff_t>(n_remove - 1),
                   alive.end(), [](const Survivor& a, const Survivor& b) {
                     if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
                     return a.index < b.index;
                   });
  for (std::size_t i = 0; i < n_remove; ++i) out.set(alive[i].index, false);
  return out;
}

}  // namespace

Mask global_magnitude_prune(const ParamStore& params, const Mask& mask, double fraction) {
  if (fraction <= 0.0 || fraction >= 1.0) throw ConfigError("prune fraction must be in (0, 1)");
  require_mask_matches(params, mask);
  const std::size_t alive = mask.popcount();
  if (alive == 0) throw NumericError("no surviving weights left to prune");
  const auto n_remove =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(alive)));
  return remove_smallest(params, mask, n_remove);
}

Mask prune_to_survivors(const ParamStore& params, const Mask& mask,
                        std::size_t target_survivors) {
  require_mask_matches(params, mask);
  const std::size_t alive = mask.popcount();
  if (alive == 0) throw NumericError("no surviving weights left to prune");
  if (target_survivors > alive)
    throw ConfigError("target survivor count " + std::to_string(target_survivors) +
                      " exceeds the current " + std::to_string(alive));
  return remove_smallest(params, mask, alive - target_survivors);
}

std::string rewind_mode_name(RewindMode mode) {
  switch (mode) {
    case RewindMode::Pretrained: return "pretrained";
    case RewindMode::Random: return "random";
    case RewindMode::Early: return "early";
  }
  return "unknown";
}

RewindMode rewind_mode_from(const std::string& name) {
  if (name == "pretrained") return RewindMode::Pretrained;
  if (name == "random") return RewindMode::Random;
  if (name == "early") return RewindMode::Early;
  throw ConfigError("unknown rewind mode '" + name + "' (pretrained|random|early)");
}

void RewindSpec::validate() const {
  if (mode == RewindMode::Early && (r_percent <= 0.0 || r_percent >= 100.0))
    throw ConfigError("early rewind percent must be in (0, 100)");
}

std::size_t early_rewind_epoch(double r_percent, std::size_t epochs) {
  if (r_percent <= 0.0 || r_percent >= 100.0)
    throw ConfigError("early rewind percent must be in (0, 100)");
  if (epochs == 0) throw ConfigError("early rewind needs at least one training epoch");
  const auto e = static_cast<std::size_t>(
      std::ceil(r_percent / 100.0 * static_cast<double>(epochs) - 1e-9));
  return std::clamp<std::size_t>(e, 1, epochs);
}

void rewind(Model& model, const ParamStore& source, const Mask& mask, Rng& head_rng) {
  auto& P = model.params;
  for (auto& e : P.entries) {
    if (e.is_head) continue;
    bool found = false;
    for (const auto& s : source.entries) {
      if (s.name != e.name) continue;
      if (s.value.shape != e.value.shape)
        throw DimensionError("rewind source parameter '" + e.name + "' has shape " +
                             s.value.shape_str() + ", expected " + e.value.shape_str());
      e.value = s.value;
      found = true;
      break;
    }
    if (!found) throw DimensionError("rewind source is missing parameter '" + e.name + "'");
  }
  reinit_head(model, head_rng);
  // Mask re-applied: rewound values at masked coordinates drop to zero.
  require_mask_matches(P, mask);
  for (auto& e : P.entries) {
    if (!e.prunable) continue;
    for (std::size_t k = 0; k < e.value.size(); ++k)
      if (!mask.get(e.mask_offset + k)) e.value.data[k] = 0.0;
  }
  P.bump_revision();
}

std::vector<ImpRoundResult> imp_run(const Checkpoint& initial, const TaskSpec& task,
                                    const TrainConfig& train_config, const ImpOptions& opts,
                                    std::ostream* progress) {
  if (opts.prune_fraction <= 0.0 || opts.prune_fraction >= 1.0)
    throw ConfigError("per-round prune fraction must be in (0, 1)");
  if (opts.rewind_source.entries.empty())
    throw ConfigError("imp run needs a rewind source parameter store");

  Model model = model_with_params(initial.config, initial.params);
  Mask mask = initial.mask;
  require_mask_matches(model.params, mask);
  const std::size_t d1 = model.params.d1();
  SparsityLadder ladder{opts.rounds, opts.prune_fraction};

  // The ladder is anchored at the full weight count: round-0 mask is
  // all-ones by contract.
  if (mask.popcount() != d1)
    throw ConfigError("imp starts from an all-ones mask; got popcount " +
                      std::to_string(mask.popcount()) + " of " + std::to_string(d1));

  std::vector<ImpRoundResult> results;
  Rng seed_rng(train_config.seed);
  for (std::size_t k = 1; k <= opts.rounds; ++k) {
    TrainHistory history;
    try {
      history = train(model, mask, task, train_config, progress);
    } catch (const DivergenceError& e) {
      if (progress)
        (*progress) << "round=" << k << " aborted: " << e.what() << std::endl;
      break;
    }
    const double trained_metric = history.epochs.empty() ? 0.0 : history.epochs.back().metric;

    mask = prune_to_survivors(model.params, mask, ladder.survivors_at(k, d1));
    Rng head_rng = seed_rng.derive("head-rewind", k);
    rewind(model, opts.rewind_source, mask, head_rng);

    ImpRoundResult r;
    r.round = k;
    r.mask = mask;
    r.sparsity = mask.sparsity();
    r.trained_metric = trained_metric;
    if (!opts.out_dir.empty()) {
      std::filesystem::create_directories(opts.out_dir);
      char suffix[32];
      std::snprintf(suffix, sizeof suffix, "_round%02zu", k);
      const std::string base = opts.out_dir + "/" + opts.tag + suffix;
      r.mask_path = base + ".mask";
      save_mask(mask, r.mask_path);
      Checkpoint ckpt;
      ckpt.config = model.config;
      ckpt.params = model.params;
      ckpt.mask = mask;
      ckpt.opt = make_opt_state(model.params);  // optimizer resets every round
      ckpt.rng_seed = seed_rng.seed();
      ckpt.rng_counter = seed_rng.counter();
      ckpt.round = k;
      ckpt.epoch = train_config.epochs;
      ckpt.task_id = task.name;
      ckpt.parent_id = initial.task_id;
      r.ckpt_path = base + ".ckpt";
      save_checkpoint(ckpt, r.ckpt_path);
    }
    if (progress)
      (*progress) << "round=" << k << " sparsity=" << r.sparsity
                  << " trained_metric=" << trained_metric << std::endl;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace implab
