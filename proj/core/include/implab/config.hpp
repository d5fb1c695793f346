#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "implab/imp.hpp"
#include "implab/network.hpp"
#include "implab/tasks.hpp"
#include "implab/training.hpp"

namespace implab {

struct ImpConfig {
  std::size_t rounds = 5;
  double prune_fraction = 0.2;
  RewindSpec rewind;

  void validate() const;
};

// One experiment description: model, pre-training task, optional downstream
// task, per-phase training configs, IMP settings, seeds, output directory.
// Loaded from strict JSON: unknown keys are rejected at every nesting level
// and every diagnostic carries the JSON path of the offending field.
struct ExperimentConfig {
  std::string out_dir;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  ModelConfig model;
  TaskSpec task;
  bool has_downstream = false;
  TaskSpec downstream_task;

  TrainConfig train;
  TrainConfig downstream_train;  // defaults to `train` when absent

  ImpConfig imp;

  void validate() const;
};

// Parses and validates config text. `origin` names the source (file path) in
// diagnostics; JSON syntax errors report line and column.
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin);

// Reads the file and parses it. Relative dataset manifest paths inside the
// config resolve against the config file's directory.
ExperimentConfig load_experiment_config(const std::string& path);

}  // namespace implab
