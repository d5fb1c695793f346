#include "implab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace implab {

void Schedule::validate() const {
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw ConfigError("schedule milestones must be strictly increasing");
  if (kind == ScheduleKind::Step || kind == ScheduleKind::WarmupStep) {
    if (factor <= 0.0 || factor > 1.0)
      throw ConfigError("step decay factor must be in (0, 1]");
  }
  if (kind == ScheduleKind::WarmupStep && warmup_iters == 0)
    throw ConfigError("warmup schedule needs warmup_iters >= 1");
  if (kind == ScheduleKind::Cosine && lr_min < 0.0)
    throw ConfigError("cosine lr_min must be >= 0");
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  schedule.validate();
}

OptState make_opt_state(const ParamStore& params) {
  OptState opt;
  opt.velocity.reserve(params.entries.size());
  for (const auto& e : params.entries)
    opt.velocity.push_back(e.trainable ? Tensor::zeros(e.value.shape) : Tensor{});
  return opt;
}

double lr_at(const TrainConfig& config, std::size_t epoch, std::size_t iter) {
  const Schedule& s = config.schedule;
  switch (s.kind) {
    case ScheduleKind::Fixed:
      return config.lr;
    case ScheduleKind::Step: {
      double lr = config.lr;
      for (std::size_t m : s.milestones)
        if (epoch >= m) lr *= s.factor;
      return lr;
    }
    case ScheduleKind::Cosine: {
      if (s.total_iters == 0)
        throw ConfigError("cosine schedule needs total_iters (train() fills it)");
      if (s.total_iters == 1) return config.lr;
      const double t =
          static_cast<double>(std::min(iter, s.total_iters - 1)) /
          static_cast<double>(s.total_iters - 1);
      return s.lr_min + 0.5 * (config.lr - s.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
    }
    case ScheduleKind::WarmupStep: {
      double lr = config.lr;
      for (std::size_t m : s.milestones)
        if (epoch >= m) lr *= s.factor;
      if (iter < s.warmup_iters)
        lr *= static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
      return lr;
    }
  }
  throw ConfigError("unknown schedule kind");
}

void sgd_step(ParamStore& params, const Grads& grads, const Mask& mask, OptState& opt,
              double lr_now, double momentum, double weight_decay) {
  if (grads.by_entry.size() != params.entries.size() ||
      opt.velocity.size() != params.entries.size())
    throw DimensionError("gradients/optimizer state do not line up with the parameter entries");
  require_mask_matches(params, mask);

  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    const Tensor& g = grads.by_entry[i];
    if (!e.trainable || g.size() == 0) continue;
    if (g.shape != e.value.shape)
      throw DimensionError("gradient shape " + g.shape_str() + " does not match parameter '" +
                           e.name + "'");
    for (double v : g.data)
      if (!std::isfinite(v))
        throw NumericError("non-finite gradient for parameter '" + e.name + "'");
    Tensor& v = opt.velocity[i];
    const double wd = e.decay ? weight_decay : 0.0;
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      v.data[k] = momentum * v.data[k] + g.data[k] + wd * e.value.data[k];
      e.value.data[k] -= lr_now * v.data[k];
    }
    if (e.prunable)
      for (std::size_t k = 0; k < e.value.size(); ++k)
        if (!mask.get(e.mask_offset + k)) {
          e.value.data[k] = 0.0;
          v.data[k] = 0.0;
        }
  }
  ++opt.step_count;
  params.bump_revision();
}

namespace {

Tensor gather_images(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                     std::size_t end) {
  const std::size_t C = ds.images.shape[1], H = ds.images.shape[2], W = ds.images.shape[3];
  const std::size_t item = C * H * W;
  Tensor out = Tensor::zeros({end - begin, C, H, W});
  for (std::size_t i = begin; i < end; ++i)
    std::copy(ds.images.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * item),
              ds.images.data.begin() + static_cast<std::ptrdiff_t>((idx[i] + 1) * item),
              out.data.begin() + static_cast<std::ptrdiff_t>((i - begin) * item));
  return out;
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& idx,
                               std::size_t begin, std::size_t end) {
  std::vector<int> out(end - begin);
  for (std::size_t i = begin; i < end; ++i) out[i - begin] = ds.labels[idx[i]];
  return out;
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
  std::vector<std::size_t> shape = a.shape;
  shape[0] += b.shape[0];
  Tensor out = Tensor::zeros(shape);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

}  // namespace

TrainHistory train(Model& model, const Mask& mask, const TaskSpec& task,
                   const TrainConfig& config, std::ostream* progress,
                   std::size_t snapshot_epoch, ParamStore* snapshot_out) {
  config.validate();
  task.validate(config.batch_size);
  require_mask_matches(model.params, mask);
  const Dataset& ds = task.dataset;
  if (ds.train_idx.empty()) throw ConfigError("task '" + task.name + "' has an empty train split");

  TrainHistory history;
  if (config.epochs == 0) return history;

  // Every stream is derived from the config seed, so a (config, seed,
  // checkpoint) triple replays bit-exactly.
  Rng seed_rng(config.seed);
  Rng shuffle_rng = seed_rng.derive("shuffle");
  Rng aug_rng = seed_rng.derive("augment");

  // Batches of size < 2 are dropped: batch statistics and paired-view losses
  // are undefined on singletons.
  const std::size_t n_train = ds.train_idx.size();
  std::size_t n_batches = n_train / config.batch_size;
  const std::size_t rem = n_train % config.batch_size;
  if (rem >= 2) ++n_batches;
  if (n_batches == 0)
    throw ConfigError("train split of " + std::to_string(n_train) +
                      " is too small for batch size " + std::to_string(config.batch_size));

  TrainConfig cfg = config;
  if (cfg.schedule.kind == ScheduleKind::Cosine && cfg.schedule.total_iters == 0)
    cfg.schedule.total_iters = cfg.epochs * n_batches;

  // Momentum-queue state: the key encoder starts as a copy of the query
  // encoder and is only ever moved by the momentum blend.
  Model key_model;
  EmbeddingQueue queue;
  if (task.kind == TaskKind::MomentumQueue) {
    key_model = model;
    queue.capacity = task.queue_size;
  }

  OptState opt = make_opt_state(model.params);
  ParamStore last_good = model.params;
  std::vector<std::size_t> order = ds.train_idx;
  std::size_t iter = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_below(i)]);

    double loss_sum = 0.0;
    double lr_now = cfg.lr;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      lr_now = lr_at(cfg, epoch, iter);
      double batch_loss = 0.0;
      try {
        if (task.kind == TaskKind::Supervised) {
          Tensor x = gather_images(ds, order, begin, end);
          if (task.augment_supervised) x = augment(x, task.aug, aug_rng);
          const std::vector<int> y = gather_labels(ds, order, begin, end);
          ActivationTape tape;
          const Tensor logits = forward(model, mask, x, RunMode::Train, &tape);
          LossGrad lg = supervised_loss(logits, y);
          batch_loss = lg.loss;
          Grads grads = backward(model, mask, tape, lg.grad);
          sgd_step(model.params, grads, mask, opt, lr_now, cfg.momentum, cfg.weight_decay);
        } else if (task.kind == TaskKind::NtXent) {
          const Tensor x = gather_images(ds, order, begin, end);
          const Tensor va = augment(x, task.aug, aug_rng);
          const Tensor vb = augment(x, task.aug, aug_rng);
          ActivationTape tape;
          const Tensor emb = forward(model, mask, concat_batch(va, vb), RunMode::Train, &tape);
          const std::size_t n = end - begin, d = emb.shape[1];
          Tensor z = Tensor::zeros({n, d}), zp = Tensor::zeros({n, d});
          std::copy(emb.data.begin(), emb.data.begin() + static_cast<std::ptrdiff_t>(n * d),
                    z.data.begin());
          std::copy(emb.data.begin() + static_cast<std::ptrdiff_t>(n * d), emb.data.end(),
                    zp.data.begin());
          PairLossGrad lg = ntxent_loss(z, zp, task.temperature);
          batch_loss = lg.loss;
          Grads grads = backward(model, mask, tape, concat_batch(lg.dz, lg.dzp));
          sgd_step(model.params, grads, mask, opt, lr_now, cfg.momentum, cfg.weight_decay);
        } else {
          const Tensor x = gather_images(ds, order, begin, end);
          const Tensor va = augment(x, task.aug, aug_rng);
          const Tensor vb = augment(x, task.aug, aug_rng);
          QueueStepResult step = momentum_queue_step(model, key_model, queue, mask, va, vb,
                                                     task.temperature, task.momentum_coef);
          batch_loss = step.loss;
          sgd_step(model.params, step.grads, mask, opt, lr_now, cfg.momentum, cfg.weight_decay);
        }
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " +
                                  e.what(),
                              last_good, epoch);
      }
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) +
                                  ": non-finite loss",
                              last_good, epoch);
      loss_sum += batch_loss;
      ++counted;
      ++iter;
    }
    const double mean_loss = loss_sum / static_cast<double>(counted);
    const double metric = evaluate(model, mask, task);
    history.epochs.push_back({mean_loss, metric, lr_now});
    last_good = model.params;
    if (snapshot_out != nullptr && epoch + 1 == snapshot_epoch) *snapshot_out = model.params;
    if (progress)
      (*progress) << "epoch=" << epoch << " loss=" << mean_loss << " metric=" << metric
                  << std::endl;
  }
  return history;
}

double evaluate(Model& model, const Mask& mask, const TaskSpec& task) {
  require_mask_matches(model.params, mask);
  const Dataset& ds = task.dataset;
  const std::vector<std::size_t>& idx = ds.test_idx.empty() ? ds.train_idx : ds.test_idx;
  if (idx.empty()) throw ConfigError("task '" + task.name + "' has no data to evaluate");

  if (task.kind == TaskKind::Supervised) {
    constexpr std::size_t kEvalBatch = 256;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < idx.size(); begin += kEvalBatch) {
      const std::size_t end = std::min(begin + kEvalBatch, idx.size());
      const Tensor x = gather_images(ds, idx, begin, end);
      const Tensor logits = forward(model, mask, x, RunMode::Eval, nullptr);
      const std::size_t K = logits.shape[1];
      for (std::size_t i = 0; i < end - begin; ++i)
        if (static_cast<int>(argmax_row(logits.data.data() + i * K, K)) == ds.labels[idx[begin + i]])
          ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
  }

  // Contrastive: retrieval accuracy over a fixed batch of paired views.
  const std::size_t n = std::min<std::size_t>(task.eval_pairs, idx.size());
  if (n < 2) throw ConfigError("contrastive evaluation needs at least 2 samples");
  const Tensor x = gather_images(ds, idx, 0, n);
  Rng eval_rng(fnv1a64(task.name) ^ fnv1a64("eval-views"));
  const Tensor va = augment(x, task.aug, eval_rng);
  const Tensor vb = augment(x, task.aug, eval_rng);
  const Tensor za = forward(model, mask, va, RunMode::Eval, nullptr);
  const Tensor zb = forward(model, mask, vb, RunMode::Eval, nullptr);
  return top1_retrieval_accuracy(za, zb);
}

}  // namespace implab
