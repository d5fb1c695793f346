#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <unordered_set>
#include <vector>

#include "implab/imp.hpp"
#include "implab/store.hpp"
#include "implab/tasks.hpp"
#include "implab/training.hpp"

namespace implab {

// One (arm, task, mask, init, seed) evaluation. Wall time is kept for
// interactive reporting but stays out of the CSV so reruns are bit-identical.
struct RunRecord {
  std::string arm;
  std::string task;
  std::string mask_id;
  double sparsity = 0.0;
  std::string init;
  std::uint64_t seed = 0;
  double metric = 0.0;
  std::size_t epochs = 0;
  double wall_seconds = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n-1); 0 when n == 1
  std::size_t n_seeds = 0;
};

Aggregate aggregate(const std::vector<double>& values);

// One-standard-deviation rule: the subnetwork matches when its mean is no
// worse than the dense mean minus the dense std.
bool is_matching(const Aggregate& sub, const Aggregate& dense);

// Matching and initialized from the pre-trained weights.
bool is_winning_ticket(const Aggregate& sub, const Aggregate& dense, RewindMode init);

struct TaskOutcome {
  std::string task;
  Aggregate sub;
  Aggregate dense;
};

// Matching on every task in the set; an empty set is vacuously universal
// (warned about when a stream is given).
bool is_universal(const std::vector<TaskOutcome>& outcomes, std::ostream* warn = nullptr);

// One transfer arm on one task and seed: adopt the source parameters, attach
// a freshly initialized task head, zero the masked coordinates, train with
// the downstream config (seed overridden), evaluate.
RunRecord run_transfer_arm(const std::string& arm_name, const Checkpoint& source,
                           const Mask& mask, const std::string& mask_id, RewindMode init_mode,
                           const TaskSpec& task, const TrainConfig& config, std::uint64_t seed,
                           std::ostream* progress = nullptr);

// The full protocol: every (task, seed) cell for one arm. Masks are never
// mutated.
std::vector<RunRecord> transfer_protocol(const std::string& arm_name, const Checkpoint& source,
                                         const Mask& mask, const std::string& mask_id,
                                         RewindMode init_mode,
                                         const std::vector<TaskSpec>& tasks,
                                         const TrainConfig& config,
                                         const std::vector<std::uint64_t>& seeds,
                                         std::ostream* progress = nullptr);

// Append-only results CSV `arm,task,mask_id,sparsity,init,seed,metric,epochs`
// with resume support: records already present are detected by their key.
// Appends are serialized and flushed per record; safe for concurrent sweep
// workers in this process.
class ResultsLog {
 public:
  explicit ResultsLog(std::string csv_path);

  bool contains(const RunRecord& r) const;
  void append(const RunRecord& r);
  std::vector<RunRecord> records() const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<RunRecord> records_;
  std::unordered_set<std::string> keys_;
  mutable std::mutex mu_;
};

// Identity of a record within a results log (metric excluded).
std::string record_key(const RunRecord& r);

// Mean/std aggregation per (arm, task, sparsity) as a JSON document.
std::string summarize_json(const std::vector<RunRecord>& records);

// Reads <dir>/results.csv and writes <dir>/summary.json plus
// <dir>/curves.csv (metric-vs-sparsity per arm and task). Pure function of
// the directory contents.
void write_report(const std::string& dir);

// One grid cell of the ablation sweep.
struct SweepCell {
  double temperature = 0.5;
  std::size_t width = 16;
  std::size_t round = 0;  // sparsity ladder round
  RewindMode init = RewindMode::Pretrained;
  std::uint64_t seed = 1;
};

struct SweepPlan {
  std::string task_name = "synth";
  std::size_t epochs = 0;  // recorded per row
  double prune_fraction = 0.2;
  std::vector<double> temperatures{0.5};
  std::vector<std::size_t> widths{16};
  std::vector<std::size_t> rounds{0};
  std::vector<RewindMode> init_modes{RewindMode::Pretrained};
  std::vector<std::uint64_t> seeds{1};
};

// Computes the metric for one cell; invoked from up to `jobs` threads, so it
// must only touch state it creates.
using CellRunner = std::function<double(const SweepCell&)>;

// Cartesian product over the plan axes. Cells whose key already sits in the
// log are skipped; returns the number of cells actually run.
std::size_t sweep(const SweepPlan& plan, const CellRunner& runner, ResultsLog& log,
                  std::size_t jobs = 1);

}  // namespace implab
