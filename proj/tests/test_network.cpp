#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "implab/errors.hpp"
#include "implab/network.hpp"
#include "implab/tasks.hpp"

using namespace implab;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.width = 8;
  c.depth = 2;
  c.in_channels = 3;
  c.head_kind = HeadKind::Classifier;
  c.head_arg = 10;
  return c;
}

Tensor random_batch(std::size_t b, std::size_t c, std::size_t hw, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = Tensor::zeros({b, c, hw, hw});
  for (double& v : x.data) v = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("build: d1 matches the analytic prunable count") {
  Rng rng(1);
  Model m = build_model(small_config(), rng);
  // Only block convs are prunable: depth * 2 convs * (width*width*3*3).
  const std::size_t expected = 2 * 2 * (8 * 8 * 3 * 3);
  CHECK(m.params.d1() == expected);
  CHECK(m.params.d2() > 0);

  // Layout is a bijection onto [0, d1): offsets are consecutive by entry.
  std::size_t next = 0;
  for (const auto& e : m.params.entries) {
    if (!e.prunable) continue;
    CHECK(e.mask_offset == next);
    next += e.value.size();
  }
  CHECK(next == expected);
}

TEST_CASE("build: same seed twice gives identical parameters") {
  Rng r1(7);
  Rng r2(7);
  const Model a = build_model(small_config(), r1);
  const Model b = build_model(small_config(), r2);
  REQUIRE(a.params.entries.size() == b.params.entries.size());
  for (std::size_t i = 0; i < a.params.entries.size(); ++i) {
    CHECK(a.params.entries[i].name == b.params.entries[i].name);
    CHECK(a.params.entries[i].value.data == b.params.entries[i].value.data);
  }
}

TEST_CASE("stem, norm, and head parameters are never prunable") {
  Rng rng(3);
  const Model m = build_model(small_config(), rng);
  for (const auto& e : m.params.entries) {
    if (e.prunable) {
      CHECK(e.name.rfind("block", 0) == 0);
      CHECK(e.value.shape.size() == 4);
    }
    if (e.is_head) CHECK(!e.prunable);
    if (e.name.rfind("stem", 0) == 0) CHECK(!e.prunable);
    if (e.name.find(".bn") != std::string::npos) CHECK(!e.prunable);
  }
}

TEST_CASE("head swap preserves d1 and layout hash") {
  Rng rng(5);
  Model m = build_model(small_config(), rng);
  const std::size_t d1 = m.params.d1();
  const std::uint64_t layout = m.params.layout_hash();

  Rng head_rng(11);
  swap_head(m, HeadKind::Classifier, 2, head_rng);
  CHECK(m.params.d1() == d1);
  CHECK(m.params.layout_hash() == layout);
  CHECK(m.config.head_arg == 2);

  swap_head(m, HeadKind::Projector, 8, head_rng);
  CHECK(m.params.d1() == d1);
  CHECK(m.params.layout_hash() == layout);
  CHECK(m.config.head_kind == HeadKind::Projector);
}

TEST_CASE("forward with all-ones mask equals forward on pre-masked params") {
  Rng rng(13);
  Model m = build_model(small_config(), rng);
  const Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(4, 3, 8, 21);

  const Tensor out1 = forward(m, mask, x, RunMode::Eval);
  Model pre = model_with_params(m.config, apply_mask(m.params, mask));
  const Tensor out2 = forward(pre, mask, x, RunMode::Eval);
  CHECK(out1.data == out2.data);
}

TEST_CASE("masking pre-hoc or in-op is bit-identical under a partial mask") {
  Rng rng(13);
  Model m = build_model(small_config(), rng);
  Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  Rng flip(3);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (flip.uniform() < 0.5) mask.set(i, false);
  const Tensor x = random_batch(3, 3, 8, 22);

  const Tensor out1 = forward(m, mask, x, RunMode::Eval);
  Model pre = model_with_params(m.config, apply_mask(m.params, mask));
  const Mask ones = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor out2 = forward(pre, ones, x, RunMode::Eval);
  CHECK(out1.data == out2.data);
}

TEST_CASE("all-zeros mask: output independent of block weights; blocks pass through") {
  Rng rng(17);
  Model m = build_model(small_config(), rng);
  const Mask zeros = Mask::zeros(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(2, 3, 8, 31);

  ActivationTape tape;
  const Tensor out1 = forward(m, zeros, x, RunMode::Eval, &tape);
  // Residual skip: with every block weight masked off (and norm parameters
  // at init), each block is the identity on its input.
  for (const auto& bs : tape.blocks) CHECK(bs.out.data == bs.in.data);

  // Changing block weights must not move the output.
  for (auto& e : m.params.entries) {
    if (e.prunable)
      for (double& v : e.value.data) v = 99.0;
  }
  m.params.bump_revision();
  const Tensor out2 = forward(m, zeros, x, RunMode::Eval);
  CHECK(out1.data == out2.data);
}

TEST_CASE("flipping a mask bit matters iff the weight is nonzero") {
  Rng rng(19);
  Model m = build_model(small_config(), rng);
  Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(2, 3, 8, 41);
  const Tensor base = forward(m, mask, x, RunMode::Eval);

  // Nonzero weight: flipping its bit changes the output.
  Mask off_one = mask;
  off_one.set(0, false);
  const Tensor changed = forward(m, off_one, x, RunMode::Eval);
  CHECK(changed.data != base.data);

  // Zero weight: flipping its bit is invisible.
  for (auto& e : m.params.entries) {
    if (e.prunable && e.mask_offset == 0) {
      e.value.data[0] = 0.0;
      break;
    }
  }
  m.params.bump_revision();
  const Tensor a = forward(m, mask, x, RunMode::Eval);
  const Tensor b = forward(m, off_one, x, RunMode::Eval);
  CHECK(a.data == b.data);
}

TEST_CASE("backward: zero output grad gives zero parameter grads") {
  Rng rng(23);
  Model m = build_model(small_config(), rng);
  const Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(3, 3, 8, 51);

  ActivationTape tape;
  (void)forward(m, mask, x, RunMode::Train, &tape);
  const Grads g = backward(m, mask, tape, Tensor::zeros({3, 10}));
  for (const Tensor& t : g.by_entry) {
    for (double v : t.data) CHECK(v == 0.0);
  }
}

TEST_CASE("backward: masked coordinates report exactly zero gradient") {
  Rng rng(29);
  Model m = build_model(small_config(), rng);
  Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  Rng flip(4);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (flip.uniform() < 0.4) mask.set(i, false);

  const Tensor x = random_batch(3, 3, 8, 61);
  ActivationTape tape;
  (void)forward(m, mask, x, RunMode::Train, &tape);
  Tensor og = Tensor::zeros({3, 10});
  Rng og_rng(5);
  for (double& v : og.data) v = og_rng.normal();
  const Grads g = backward(m, mask, tape, og);

  for (std::size_t i = 0; i < m.params.entries.size(); ++i) {
    const ParamEntry& e = m.params.entries[i];
    if (!e.prunable) continue;
    for (std::size_t j = 0; j < e.value.size(); ++j) {
      if (!mask.get(e.mask_offset + j)) CHECK(g.by_entry[i].data[j] == 0.0);
    }
  }
}

TEST_CASE("finite differences validate gradients on a spot sample") {
  // Full per-layer 50-coordinate sweeps run in the acceptance binary; this
  // is a fast smoke version through the supervised loss.
  ModelConfig cfg = small_config();
  cfg.width = 4;
  cfg.head_arg = 3;
  Rng rng(31);
  Model m = build_model(cfg, rng);
  Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  Rng flip(6);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (flip.uniform() < 0.3) mask.set(i, false);

  const Tensor x = random_batch(3, 3, 6, 71);
  const std::vector<int> labels{0, 1, 2};

  // Train mode throughout: backward differentiates the batch-statistics
  // path, so the finite-difference probes must run the same path.
  auto loss_of = [&](Model& model) {
    const Tensor logits = forward(model, mask, x, RunMode::Train);
    return supervised_loss(logits, labels).loss;
  };

  ActivationTape tape;
  const Tensor logits = forward(m, mask, x, RunMode::Train, &tape);
  const LossGrad lg = supervised_loss(logits, labels);
  const Grads g = backward(m, mask, tape, lg.grad);

  const double h = 1e-5;
  Rng pick(8);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 50; ++trial) {
    const std::size_t ei = pick.uniform_below(m.params.entries.size());
    ParamEntry& e = m.params.entries[ei];
    if (!e.trainable || e.value.size() == 0) continue;
    const std::size_t j = pick.uniform_below(e.value.size());
    if (e.prunable && !mask.get(e.mask_offset + j)) continue;

    const double keep = e.value.data[j];
    e.value.data[j] = keep + h;
    m.params.bump_revision();
    const double up = loss_of(m);
    e.value.data[j] = keep - h;
    m.params.bump_revision();
    const double down = loss_of(m);
    e.value.data[j] = keep;
    m.params.bump_revision();

    const double fd = (up - down) / (2.0 * h);
    const double an = g.by_entry[ei].data[j];
    const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
    CHECK(rel < 1e-4);
    ++checked;
  }
  CHECK(checked == 50);
}

TEST_CASE("stale tape is rejected after a parameter update") {
  Rng rng(37);
  Model m = build_model(small_config(), rng);
  const Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(2, 3, 8, 81);

  ActivationTape tape;
  (void)forward(m, mask, x, RunMode::Train, &tape);
  m.params.entries[0].value.data[0] += 0.5;
  m.params.bump_revision();
  CHECK_THROWS_AS(backward(m, mask, tape, Tensor::zeros({2, 10})), Error);
}

TEST_CASE("mask layout binding is enforced") {
  Rng rng(41);
  Model m = build_model(small_config(), rng);
  const Mask wrong_size = Mask::ones(m.params.d1() - 1, m.params.layout_hash());
  const Mask wrong_layout = Mask::ones(m.params.d1(), 12345);
  const Tensor x = random_batch(1, 3, 8, 91);
  CHECK_THROWS_AS(forward(m, wrong_size, x, RunMode::Eval), DimensionError);
  CHECK_THROWS_AS(forward(m, wrong_layout, x, RunMode::Eval), DimensionError);
}

TEST_CASE("projector head produces embed_dim outputs") {
  ModelConfig cfg = small_config();
  cfg.head_kind = HeadKind::Projector;
  cfg.head_arg = 12;
  Rng rng(43);
  Model m = build_model(cfg, rng);
  const Mask mask = Mask::ones(m.params.d1(), m.params.layout_hash());
  const Tensor x = random_batch(5, 3, 8, 101);
  const Tensor out = forward(m, mask, x, RunMode::Eval);
  CHECK(out.shape == std::vector<std::size_t>{5, 12});
}

TEST_CASE("config validation bounds") {
  ModelConfig c = small_config();
  c.width = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.depth = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.depth = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(small_config().validate());
}
