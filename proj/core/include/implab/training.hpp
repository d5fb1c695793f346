#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include "implab/errors.hpp"
#include "implab/network.hpp"
#include "implab/tasks.hpp"

namespace implab {

enum class ScheduleKind { Fixed, Step, Cosine, WarmupStep };

struct Schedule {
  ScheduleKind kind = ScheduleKind::Fixed;
  std::vector<std::size_t> milestones;  // epoch indices, strictly increasing
  double factor = 0.1;                  // step decay multiplier
  double lr_min = 0.0;                  // cosine floor
  std::size_t warmup_iters = 0;
  std::size_t total_iters = 0;  // cosine horizon; train() fills it when 0

  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.1;
  Schedule schedule;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;

  void validate() const;  // lr > 0, 0 <= momentum < 1
};

// Per-entry momentum buffers, aligned with ParamStore entries (empty tensor
// for non-trainable entries). Buffers at masked coordinates stay zero.
struct OptState {
  std::vector<Tensor> velocity;
  std::size_t step_count = 0;

  bool operator==(const OptState&) const = default;
};

OptState make_opt_state(const ParamStore& params);

// Learning rate for (epoch, global iteration) under the config's schedule.
double lr_at(const TrainConfig& config, std::size_t epoch, std::size_t iter);

// v <- momentum*v + grad + weight_decay*w (decay only where the entry opts
// in); w <- w - lr_now*v; masked coordinates and their buffers forced to 0.
void sgd_step(ParamStore& params, const Grads& grads, const Mask& mask, OptState& opt,
              double lr_now, double momentum, double weight_decay);

struct EpochStats {
  double loss;    // mean train loss over the epoch's batches
  double metric;  // evaluate() at epoch end
  double lr;      // last lr used this epoch
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

// Loss went non-finite; carries the last parameters that were still good
// (end of the previous epoch, or the initial ones).
struct DivergenceError : NumericError {
  DivergenceError(const std::string& msg, ParamStore last, std::size_t epoch)
      : NumericError(msg), last_good(std::move(last)), failed_epoch(epoch) {}
  ParamStore last_good;
  std::size_t failed_epoch;
};

// Runs config.epochs of SGD over seeded-shuffled train batches. The task
// kind selects the loss (cross-entropy / paired-view contrastive / momentum
// queue). Emits one `epoch=<k> loss=<v> metric=<v>` line per epoch to
// `progress` when given. When `snapshot_out` is set and snapshot_epoch lies
// in [1, epochs], the parameters are copied into it right after that epoch
// finishes (the early-rewind capture point).
TrainHistory train(Model& model, const Mask& mask, const TaskSpec& task,
                   const TrainConfig& config, std::ostream* progress = nullptr,
                   std::size_t snapshot_epoch = 0, ParamStore* snapshot_out = nullptr);

// Task metric on the held-out split (train split when no test indices
// exist): classification accuracy in [0,1] for supervised tasks, top-1
// retrieval accuracy in percent for contrastive tasks. Pure: eval-mode
// forwards only, deterministic per call.
double evaluate(Model& model, const Mask& mask, const TaskSpec& task);

}  // namespace implab
