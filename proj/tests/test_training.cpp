// Training module: schedules, SGD, the train loop, and evaluation.
#include <cmath>
#include <vector>

#include "doctest.h"
#include "implab/errors.hpp"
#include "implab/network.hpp"
#include "implab/rng.hpp"
#include "implab/tasks.hpp"
#include "implab/tensor.hpp"
#include "implab/training.hpp"

using namespace implab;

namespace {

// Two classes separated by overall brightness; trivially separable.
Dataset brightness_dataset(std::size_t n, bool with_test_split) {
  Dataset ds;
  ds.name = "brightness";
  ds.n_classes = 2;
  ds.images = Tensor::zeros({n, 3, 8, 8});
  ds.labels.resize(n);
  Rng rng(99);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels[i] = y;
    double* p = ds.images.data.data() + i * 3 * 64;
    const double base = y == 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < 3 * 64; ++k) p[k] = base + 0.1 * rng.normal();
  }
  if (with_test_split) {
    for (std::size_t i = 0; i < n; ++i)
      (i < (3 * n) / 4 ? ds.train_idx : ds.test_idx).push_back(i);
  } else {
    for (std::size_t i = 0; i < n; ++i) ds.train_idx.push_back(i);
  }
  ds.validate();
  return ds;
}

TaskSpec supervised_task(Dataset ds) {
  TaskSpec task;
  task.name = ds.name;
  task.kind = TaskKind::Supervised;
  task.dataset = std::move(ds);
  return task;
}

struct Rig {
  Model model;
  Mask mask;

  explicit Rig(std::size_t n_classes = 2, std::uint64_t seed = 3) {
    ModelConfig mc;
    mc.width = 4;
    mc.depth = 2;
    mc.head_kind = HeadKind::Classifier;
    mc.head_arg = n_classes;
    Rng rng(seed);
    model = build_model(mc, rng);
    mask = Mask::ones(model.params.d1(), model.params.layout_hash());
  }
};

}  // namespace

// ---- learning-rate schedules ------------------------------------------------

TEST_CASE("lr_at: step decay multiplies by the factor at each passed milestone") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.schedule.kind = ScheduleKind::Step;
  cfg.schedule.milestones = {91, 136};
  cfg.schedule.factor = 0.1;
  CHECK(lr_at(cfg, 100, 0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at(cfg, 90, 0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at(cfg, 140, 0) == doctest::Approx(0.001).epsilon(1e-12));
}

TEST_CASE("lr_at: cosine decays from the base lr to lr_min at the final iter") {
  TrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.schedule.kind = ScheduleKind::Cosine;
  cfg.schedule.lr_min = 1e-6;
  cfg.schedule.total_iters = 1000;
  CHECK(lr_at(cfg, 0, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 0, 999) == doctest::Approx(1e-6).epsilon(1e-12));
  // Midpoint of the cosine: halfway between base and floor.
  const double mid = lr_at(cfg, 0, 499);
  CHECK(mid < 1e-4);
  CHECK(mid > 1e-6);
  // Unfilled horizon is a config error (train() fills it in real runs).
  TrainConfig empty = cfg;
  empty.schedule.total_iters = 0;
  CHECK_THROWS_AS(lr_at(empty, 0, 0), ConfigError);
}

TEST_CASE("lr_at: linear warmup reaches half the base lr at half the warmup") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.schedule.kind = ScheduleKind::WarmupStep;
  cfg.schedule.warmup_iters = 100;
  CHECK(lr_at(cfg, 0, 50) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(lr_at(cfg, 0, 0) == 0.0);  // warmup starts from zero
  CHECK(lr_at(cfg, 0, 100) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("lr_at: step and cosine schedules are non-increasing after warmup") {
  TrainConfig step;
  step.lr = 0.5;
  step.schedule.kind = ScheduleKind::Step;
  step.schedule.milestones = {3, 7, 11};
  step.schedule.factor = 0.2;
  double prev = step.lr;
  for (std::size_t e = 0; e < 15; ++e) {
    const double lr = lr_at(step, e, e * 10);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }

  TrainConfig cos;
  cos.lr = 0.3;
  cos.schedule.kind = ScheduleKind::Cosine;
  cos.schedule.lr_min = 1e-3;
  cos.schedule.total_iters = 200;
  prev = cos.lr;
  for (std::size_t it = 0; it < 200; ++it) {
    const double lr = lr_at(cos, 0, it);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("schedule and config validation") {
  Schedule s;
  s.kind = ScheduleKind::Step;
  s.milestones = {5, 5};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.milestones = {7, 3};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.milestones = {3, 7};
  CHECK_NOTHROW(s.validate());

  TrainConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.momentum = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

// ---- sgd_step ----------------------------------------------------------------

namespace {

// A one-entry parameter store for arithmetic-level optimizer checks.
struct TinyParams {
  ParamStore params;
  Mask mask;
  Grads grads;
  OptState opt;

  explicit TinyParams(std::vector<double> w, std::vector<double> g, bool decay = false) {
    ParamEntry e;
    e.name = "block0.conv1.w";
    e.value = Tensor::zeros({w.size()});
    e.value.data = w;
    e.prunable = true;
    e.trainable = true;
    e.decay = decay;
    e.mask_offset = 0;
    params.entries.push_back(std::move(e));
    mask = Mask::ones(params.d1(), params.layout_hash());
    Tensor gt = Tensor::zeros({g.size()});
    gt.data = std::move(g);
    grads.by_entry.push_back(std::move(gt));
    opt = make_opt_state(params);
  }
};

}  // namespace

TEST_CASE("sgd: zero momentum and decay is plain gradient descent") {
  TinyParams tp({1.0, -2.0, 0.5}, {0.5, 0.25, -1.0});
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, 0.1, 0.0, 0.0);
  const auto& w = tp.params.entries[0].value.data;
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(-2.0 - 0.1 * 0.25).epsilon(1e-15));
  CHECK(w[2] == doctest::Approx(0.5 + 0.1 * 1.0).epsilon(1e-15));
}

TEST_CASE("sgd: two momentum steps apply eta*g*(1 + 1.9) in total") {
  TinyParams tp({1.0}, {1.0});
  const double eta = 0.1;
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, eta, 0.9, 0.0);
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, eta, 0.9, 0.0);
  CHECK(tp.params.entries[0].value.data[0] ==
        doctest::Approx(1.0 - eta * 1.0 * (1.0 + 1.9)).epsilon(1e-14));
  CHECK(tp.opt.step_count == 2);
}

TEST_CASE("sgd: weight decay folds decay*w into the velocity") {
  TinyParams tp({2.0}, {0.0}, /*decay=*/true);
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, 0.1, 0.0, 0.01);
  // v = 0 + 0 + 0.01*2 = 0.02; w = 2 - 0.1*0.02.
  CHECK(tp.params.entries[0].value.data[0] == doctest::Approx(2.0 - 0.002).epsilon(1e-14));

  TinyParams nodecay({2.0}, {0.0}, /*decay=*/false);
  sgd_step(nodecay.params, nodecay.grads, nodecay.mask, nodecay.opt, 0.1, 0.0, 0.01);
  CHECK(nodecay.params.entries[0].value.data[0] == 2.0);
}

TEST_CASE("sgd: masked coordinates and their buffers stay zero") {
  TinyParams tp({1.0, 1.0}, {5.0, 5.0});
  tp.mask.set(0, false);
  tp.params.entries[0].value.data[0] = 0.0;  // pruned weight starts at zero
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, 0.1, 0.9, 0.0);
  sgd_step(tp.params, tp.grads, tp.mask, tp.opt, 0.1, 0.9, 0.0);
  CHECK(tp.params.entries[0].value.data[0] == 0.0);
  CHECK(tp.opt.velocity[0].data[0] == 0.0);
  CHECK(tp.params.entries[0].value.data[1] != 1.0);  // the live coord moved
}

TEST_CASE("sgd: non-finite gradients are rejected") {
  TinyParams tp({1.0}, {std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(sgd_step(tp.params, tp.grads, tp.mask, tp.opt, 0.1, 0.9, 0.0),
                  NumericError);
}

TEST_CASE("model entries: norm parameters and biases are exempt from decay") {
  Rig rig(10);
  bool saw_decay = false, saw_norm = false;
  for (const auto& e : rig.model.params.entries) {
    if (e.name.find("bn") != std::string::npos || e.name.find("norm") != std::string::npos) {
      CHECK(!e.decay);
      saw_norm = true;
    }
    if (e.decay) saw_decay = true;
  }
  CHECK(saw_decay);
  CHECK(saw_norm);
}

// ---- train ------------------------------------------------------------------

TEST_CASE("train: zero epochs leaves the parameters untouched") {
  Rig rig;
  TaskSpec task = supervised_task(brightness_dataset(16, false));
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 8;
  ParamStore before = rig.model.params;
  TrainHistory h = train(rig.model, rig.mask, task, cfg);
  CHECK(h.epochs.empty());
  for (std::size_t i = 0; i < before.entries.size(); ++i)
    CHECK(rig.model.params.entries[i].value.data == before.entries[i].value.data);
}

TEST_CASE("train: separable two-class set memorized within 20 epochs") {
  Rig rig;
  TaskSpec task = supervised_task(brightness_dataset(40, false));
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  cfg.seed = 5;
  TrainHistory h = train(rig.model, rig.mask, task, cfg);
  REQUIRE(h.epochs.size() == 20);
  // evaluate() falls back to the train split when no test indices exist, so
  // the final metric is training accuracy; the set is trivially separable.
  CHECK(h.epochs.back().metric >= 0.99);
  CHECK(evaluate(rig.model, rig.mask, task) == h.epochs.back().metric);
}

TEST_CASE("train: same config and seed replays bit-identically") {
  TaskSpec task = supervised_task(brightness_dataset(24, true));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 11;

  Rig a(2, 7), b(2, 7);
  TrainHistory ha = train(a.model, a.mask, task, cfg);
  TrainHistory hb = train(b.model, b.mask, task, cfg);
  for (std::size_t i = 0; i < a.model.params.entries.size(); ++i)
    CHECK(a.model.params.entries[i].value.data == b.model.params.entries[i].value.data);
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    CHECK(ha.epochs[e].loss == hb.epochs[e].loss);
    CHECK(ha.epochs[e].metric == hb.epochs[e].metric);
  }
}

TEST_CASE("train: snapshot after epoch k equals a k-epoch run under a fixed schedule") {
  TaskSpec task = supervised_task(brightness_dataset(24, true));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 13;
  cfg.schedule.kind = ScheduleKind::Fixed;

  Rig full(2, 9);
  ParamStore snap;
  train(full.model, full.mask, task, cfg, nullptr, 1, &snap);

  Rig one(2, 9);
  TrainConfig cfg1 = cfg;
  cfg1.epochs = 1;
  train(one.model, one.mask, task, cfg1);

  REQUIRE(snap.entries.size() == one.model.params.entries.size());
  for (std::size_t i = 0; i < snap.entries.size(); ++i)
    CHECK(snap.entries[i].value.data == one.model.params.entries[i].value.data);
  // And the snapshot is not the final parameters of the longer run.
  bool differs = false;
  for (std::size_t i = 0; i < snap.entries.size() && !differs; ++i)
    differs = snap.entries[i].value.data != full.model.params.entries[i].value.data;
  CHECK(differs);
}

TEST_CASE("train: divergence raises an error carrying the last good parameters") {
  // Without batchnorm the activation scale is unregulated, so an absurd lr
  // overflows the activations within an epoch.
  ModelConfig mc;
  mc.width = 4;
  mc.depth = 2;
  mc.head_kind = HeadKind::Classifier;
  mc.head_arg = 2;
  mc.use_batchnorm = false;
  Rng rng(3);
  Model model = build_model(mc, rng);
  Mask mask = Mask::ones(model.params.d1(), model.params.layout_hash());

  TaskSpec task = supervised_task(brightness_dataset(16, false));
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.lr = 1e155;  // squaring through two convs overflows to inf
  ParamStore initial = model.params;
  try {
    train(model, mask, task, cfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.failed_epoch < cfg.epochs);
    CHECK(e.last_good.entries.size() == initial.entries.size());
    for (const auto& entry : e.last_good.entries)
      for (double v : entry.value.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("train: masked coordinates remain zero through a whole run") {
  Rig rig;
  Mask mask = rig.mask;
  Rng rng(21);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (rng.uniform() < 0.5) mask.set(i, false);
  rig.model.params = apply_mask(rig.model.params, mask);

  TaskSpec task = supervised_task(brightness_dataset(16, false));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  train(rig.model, mask, task, cfg);
  for (const auto& e : rig.model.params.entries) {
    if (!e.prunable) continue;
    for (std::size_t k = 0; k < e.value.size(); ++k)
      if (!mask.get(e.mask_offset + k)) CHECK(e.value.data[k] == 0.0);
  }
}

TEST_CASE("train: contrastive kinds run and report retrieval metrics") {
  SynthSpec spec;
  spec.n = 32;
  spec.n_classes = 4;
  Dataset ds = synth_dataset(spec);

  for (TaskKind kind : {TaskKind::NtXent, TaskKind::MomentumQueue}) {
    ModelConfig mc;
    mc.width = 8;  // width 4 can emit an all-dead (zero-norm) embedding row
    mc.depth = 2;
    mc.head_kind = HeadKind::Projector;
    mc.head_arg = 8;
    Rng rng(31);
    Model model = build_model(mc, rng);
    Mask mask = Mask::ones(model.params.d1(), model.params.layout_hash());

    TaskSpec task;
    task.name = kind == TaskKind::NtXent ? "ntx" : "moco";
    task.kind = kind;
    task.dataset = ds;
    task.temperature = kind == TaskKind::NtXent ? 0.5 : 0.2;
    task.queue_size = 64;

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.lr = 0.001;  // gentle: width-4 projector embeddings collapse at high lr
    TrainHistory h = train(model, mask, task, cfg);
    REQUIRE(h.epochs.size() == 2);
    for (const auto& ep : h.epochs) {
      CHECK(std::isfinite(ep.loss));
      CHECK(ep.metric >= 0.0);
      CHECK(ep.metric <= 100.0);
    }
  }
}

// ---- evaluate ---------------------------------------------------------------

TEST_CASE("evaluate: a constant classifier scores the class-0 frequency") {
  Rig rig(10);
  // Zero the head so every logit row is constant; argmax resolves to class 0.
  for (auto& e : rig.model.params.entries)
    if (e.is_head)
      for (auto& v : e.value.data) v = 0.0;
  rig.model.params.bump_revision();

  SynthSpec spec;
  spec.n = 100;
  spec.n_classes = 10;
  spec.train_fraction = 1.0;
  TaskSpec task = supervised_task(synth_dataset(spec));
  const double acc = evaluate(rig.model, rig.mask, task);
  CHECK(acc == doctest::Approx(0.10).epsilon(1e-12));  // balanced by construction
}

TEST_CASE("evaluate: invariant to the order of the held-out indices") {
  Rig rig;
  TaskSpec task = supervised_task(brightness_dataset(24, true));
  const double base = evaluate(rig.model, rig.mask, task);

  TaskSpec shuffled = task;
  std::reverse(shuffled.dataset.test_idx.begin(), shuffled.dataset.test_idx.end());
  CHECK(evaluate(rig.model, rig.mask, shuffled) == base);
}
