// Experiment config parsing: strict JSON with path-qualified diagnostics,
// defaults, manifest resolution, and cross-field validation.
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "implab/config.hpp"
#include "implab/errors.hpp"
#include "implab/tasks.hpp"
#include "implab/training.hpp"

using namespace implab;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("implab_config_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Smallest config that parses: synth defaults (10 classes) match the default
// classifier head.
constexpr const char* kMinimal = R"({
  "out_dir": "/tmp/implab-test-out",
  "model": {},
  "task": {"name": "synth-sup", "kind": "supervised",
           "dataset": {"source": "synth", "n": 40}},
  "train": {}
})";

// Expects a ConfigError whose message carries `needle`.
void expect_config_error(const std::string& text, const std::string& needle) {
  try {
    parse_experiment_config(text, "cfg.json");
    FAIL("expected ConfigError for: ", needle);
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    INFO("diagnostic: ", what);
    CHECK(what.find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("minimal config parses with documented defaults") {
  const ExperimentConfig ec = parse_experiment_config(kMinimal, "cfg.json");

  CHECK(ec.out_dir == "/tmp/implab-test-out");
  CHECK(ec.seed == 1);
  CHECK(ec.seeds == std::vector<std::uint64_t>{1, 2, 3});

  CHECK(ec.model.width == 16);
  CHECK(ec.model.depth == 2);
  CHECK(ec.model.in_channels == 3);
  CHECK(ec.model.use_batchnorm == true);
  CHECK(ec.model.head_kind == HeadKind::Classifier);
  CHECK(ec.model.head_arg == 10);

  CHECK(ec.task.name == "synth-sup");
  CHECK(ec.task.kind == TaskKind::Supervised);
  CHECK(ec.task.dataset.size() == 40);
  CHECK(ec.task.dataset.n_classes == 10);
  CHECK(ec.task.dataset.images.shape ==
        std::vector<std::size_t>{40, 3, 8, 8});

  CHECK(ec.train.epochs == 10);
  CHECK(ec.train.batch_size == 32);
  CHECK(ec.train.lr == 0.1);
  CHECK(ec.train.momentum == 0.9);
  CHECK(ec.train.weight_decay == 0.0);
  CHECK(ec.train.schedule.kind == ScheduleKind::Fixed);
  CHECK(ec.train.seed == 1);  // top-level seed flows into the train config

  CHECK(ec.has_downstream == false);
  CHECK(ec.imp.rounds == 5);
  CHECK(ec.imp.prune_fraction == 0.2);
  CHECK(ec.imp.rewind.mode == RewindMode::Pretrained);
  CHECK(ec.imp.rewind.r_percent == 5.0);
}

TEST_CASE("full config: every field lands where it should") {
  const std::string text = R"({
    "out_dir": "/tmp/implab-full",
    "seed": 9,
    "seeds": [4, 5],
    "model": {"width": 8, "depth": 3, "in_channels": 1, "use_batchnorm": false,
              "head": "projector", "head_arg": 32},
    "task": {
      "name": "views", "kind": "ntxent",
      "dataset": {"source": "synth", "n": 30, "n_classes": 3, "resolution": 10,
                  "channels": 1, "train_fraction": 0.5, "template_seed": 2,
                  "sample_seed": 3, "domain_shift": true, "noise_sigma": 0.7,
                  "name": "tiny"},
      "temperature": 0.3, "queue_size": 64, "momentum": 0.5,
      "augment": {"crop_lo": 0.6, "crop_hi": 0.9, "flip_prob": 0.25,
                  "noise_sigma": 0.05, "channel_jitter": 0.1},
      "augment_supervised": true, "eval_pairs": 32
    },
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "momentum": 0.8,
              "weight_decay": 1e-4,
              "schedule": {"kind": "step", "milestones": [1], "factor": 0.5}},
    "downstream_task": {"name": "shift", "kind": "supervised",
                        "dataset": {"source": "synth", "n": 20, "channels": 1,
                                    "domain_shift": true}},
    "downstream_train": {"epochs": 1, "batch_size": 4, "lr": 0.01,
                         "schedule": {"kind": "cosine", "lr_min": 0.001}},
    "imp": {"rounds": 3, "prune_fraction": 0.3,
            "rewind": {"mode": "early", "r_percent": 10}}
  })";

  const ExperimentConfig ec = parse_experiment_config(text, "cfg.json");

  CHECK(ec.seed == 9);
  CHECK(ec.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(ec.model.width == 8);
  CHECK(ec.model.depth == 3);
  CHECK(ec.model.in_channels == 1);
  CHECK(ec.model.use_batchnorm == false);
  CHECK(ec.model.head_kind == HeadKind::Projector);
  CHECK(ec.model.head_arg == 32);

  CHECK(ec.task.kind == TaskKind::NtXent);
  CHECK(ec.task.dataset.name == "tiny-shift");  // domain shift tags the name
  CHECK(ec.task.dataset.images.shape == std::vector<std::size_t>{30, 1, 10, 10});
  CHECK(ec.task.temperature == 0.3);
  CHECK(ec.task.queue_size == 64);
  CHECK(ec.task.momentum_coef == 0.5);
  CHECK(ec.task.aug.crop_lo == 0.6);
  CHECK(ec.task.aug.crop_hi == 0.9);
  CHECK(ec.task.aug.flip_prob == 0.25);
  CHECK(ec.task.aug.noise_sigma == 0.05);
  CHECK(ec.task.aug.channel_jitter == 0.1);
  CHECK(ec.task.augment_supervised == true);
  CHECK(ec.task.eval_pairs == 32);

  CHECK(ec.train.epochs == 2);
  CHECK(ec.train.batch_size == 16);
  CHECK(ec.train.lr == 0.05);
  CHECK(ec.train.momentum == 0.8);
  CHECK(ec.train.weight_decay == 1e-4);
  CHECK(ec.train.schedule.kind == ScheduleKind::Step);
  CHECK(ec.train.schedule.milestones == std::vector<std::size_t>{1});
  CHECK(ec.train.schedule.factor == 0.5);

  CHECK(ec.has_downstream);
  CHECK(ec.downstream_task.name == "shift");
  CHECK(ec.downstream_train.epochs == 1);
  CHECK(ec.downstream_train.schedule.kind == ScheduleKind::Cosine);
  CHECK(ec.downstream_train.schedule.lr_min == 0.001);
  CHECK(ec.downstream_train.seed == 9);

  CHECK(ec.imp.rounds == 3);
  CHECK(ec.imp.prune_fraction == 0.3);
  CHECK(ec.imp.rewind.mode == RewindMode::Early);
  CHECK(ec.imp.rewind.r_percent == 10.0);
}

TEST_CASE("downstream_train falls back to the primary train config") {
  const std::string text = R"({
    "out_dir": "/tmp/x",
    "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {"epochs": 7, "batch_size": 4, "lr": 0.25},
    "downstream_task": {"name": "b", "kind": "supervised",
                        "dataset": {"source": "synth", "n": 20, "domain_shift": true}}
  })";
  const ExperimentConfig ec = parse_experiment_config(text, "cfg.json");
  CHECK(ec.has_downstream);
  CHECK(ec.downstream_train.epochs == 7);
  CHECK(ec.downstream_train.batch_size == 4);
  CHECK(ec.downstream_train.lr == 0.25);
}

TEST_CASE("unknown keys are rejected with their JSON path") {
  // Required keys are consumed before leftovers are reported, so the probe
  // carries a complete config plus one stray key.
  expect_config_error(R"({
    "out_dir": "x", "outdir": "y", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}
  })",
                      "$.outdir: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {"widht": 8},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}
  })",
                      "$.model.widht: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised",
             "dataset": {"source": "synth", "n": 20}, "temp": 0.5},
    "train": {}
  })",
                      "$.task.temp: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised",
             "dataset": {"source": "synth", "n": 20, "res": 8}},
    "train": {}
  })",
                      "$.task.dataset.res: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {"schedule": {"kind": "step", "gamma": 0.1}}
  })",
                      "$.train.schedule.gamma: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {},
    "imp": {"round": 3}
  })",
                      "$.imp.round: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {},
    "imp": {"rewind": {"mode": "early", "percent": 5}}
  })",
                      "$.imp.rewind.percent: unknown key");

  expect_config_error(R"({
    "out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised",
             "dataset": {"source": "synth", "n": 20}, "augment": {"blur": 1}},
    "train": {}
  })",
                      "$.task.augment.blur: unknown key");
}

TEST_CASE("missing required fields name the absent path") {
  expect_config_error(R"({"model": {}, "task": {"name": "a", "kind": "supervised",
    "dataset": {"source": "synth", "n": 20}}, "train": {}})",
                      "$.out_dir: missing required field");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "dataset": {"source": "synth", "n": 20}}, "train": {}})",
                      "$.task.kind: missing required field");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"n": 20}}, "train": {}})",
                      "$.task.dataset.source: missing required field");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {"schedule": {}}})",
                      "$.train.schedule.kind: missing required field");
}

TEST_CASE("type errors name the field and the expected shape") {
  expect_config_error(R"({"out_dir": 5, "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.out_dir: expected a string");

  expect_config_error(R"({"out_dir": "x", "model": {"width": "wide"},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.model.width: expected a non-negative integer");

  expect_config_error(R"({"out_dir": "x", "seed": -3, "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.seed: expected a non-negative integer");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {"lr": "fast"}})",
                      "$.train.lr: expected a number");

  expect_config_error(R"({"out_dir": "x", "model": {"use_batchnorm": 1},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.model.use_batchnorm: expected a boolean");

  expect_config_error(R"({"out_dir": "x", "seeds": 7, "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.seeds: expected an array");

  expect_config_error(R"({"out_dir": "x", "seeds": [1, -2], "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.seeds[1]: expected a non-negative integer");

  expect_config_error(R"({"out_dir": "x", "model": 3,
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "$.model: expected a JSON object");
}

TEST_CASE("JSON syntax errors report origin, line, and column") {
  try {
    parse_experiment_config("{\n  \"out_dir\": \"x\",,\n}", "broken.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.rfind("broken.json:2:", 0) == 0);
    CHECK(what.find("JSON syntax error") != std::string::npos);
  }

  try {
    parse_experiment_config("", "empty.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("empty.json:1:", 0) == 0);
  }
}

TEST_CASE("enum fields list their accepted values") {
  expect_config_error(R"({"out_dir": "x", "model": {"head": "resnet"},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "unknown head");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "clip", "dataset": {"source": "synth", "n": 20}},
    "train": {}})",
                      "unknown task kind");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {"schedule": {"kind": "exponential"}}})",
                      "unknown schedule kind");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
    "train": {}, "imp": {"rewind": {"mode": "sideways"}}})",
                      "unknown rewind mode");

  expect_config_error(R"({"out_dir": "x", "model": {},
    "task": {"name": "a", "kind": "supervised", "dataset": {"source": "imagenet"}},
    "train": {}})",
                      "unknown dataset source");
}

TEST_CASE("cross-field validation: head, classes, channels, imp ranges") {
  SUBCASE("supervised task needs the classifier head") {
    expect_config_error(R"({"out_dir": "x",
      "model": {"head": "projector", "head_arg": 16},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "classifier");
  }

  SUBCASE("contrastive task needs the projector head") {
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "ntxent", "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "projector");
  }

  SUBCASE("classifier width must equal the class count") {
    expect_config_error(R"({"out_dir": "x", "model": {"head_arg": 5},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "head_arg");
  }

  SUBCASE("dataset channels must match model.in_channels") {
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "supervised",
               "dataset": {"source": "synth", "n": 20, "channels": 1}},
      "train": {}})",
                        "channels");
  }

  SUBCASE("imp ranges") {
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}, "imp": {"rounds": 0}})",
                        "imp.rounds");
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}, "imp": {"prune_fraction": 1.0}})",
                        "prune_fraction");
    // Early rewind percent lives in the open interval (0, 100).
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}, "imp": {"rewind": {"mode": "early", "r_percent": 0}}})",
                        "rewind percent must be in (0, 100)");
  }

  SUBCASE("top-level coherence") {
    expect_config_error(R"({"out_dir": "", "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "out_dir");
    expect_config_error(R"({"out_dir": "x", "seeds": [], "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "seeds");
  }

  SUBCASE("task/train coherence flows into TaskSpec::validate") {
    expect_config_error(R"({"out_dir": "x",
      "model": {"head": "projector", "head_arg": 16},
      "task": {"name": "a", "kind": "momentum_queue", "queue_size": 4,
               "dataset": {"source": "synth", "n": 40}},
      "train": {"batch_size": 8}})",
                        "queue_size");
    expect_config_error(R"({"out_dir": "x",
      "model": {"head": "projector", "head_arg": 16},
      "task": {"name": "a", "kind": "ntxent", "temperature": 0.0,
               "dataset": {"source": "synth", "n": 20}},
      "train": {}})",
                        "temperature");
  }

  SUBCASE("downstream dataset channels are checked too") {
    expect_config_error(R"({"out_dir": "x", "model": {},
      "task": {"name": "a", "kind": "supervised", "dataset": {"source": "synth", "n": 20}},
      "train": {},
      "downstream_task": {"name": "b", "kind": "supervised",
                          "dataset": {"source": "synth", "n": 20, "channels": 1}}})",
                        "channel");
  }
}

TEST_CASE("load_experiment_config resolves manifest paths against the config dir") {
  const fs::path dir = fresh_dir("manifest");

  // A small real dataset next to the config file.
  SynthSpec spec;
  spec.n = 20;
  spec.n_classes = 10;
  Dataset ds = synth_dataset(spec);
  save_idx_images(ds.images, (dir / "im.idx").string());
  save_idx_labels(ds.labels, (dir / "lb.idx").string());
  std::ofstream((dir / "data.json").string())
      << R"({"name":"disk","format":"idx","images":"im.idx","labels":"lb.idx",)"
      << R"("split_seed":3,"train_fraction":0.5})";

  std::ofstream((dir / "exp.json").string()) << R"({
    "out_dir": "/tmp/implab-manifest-out",
    "model": {},
    "task": {"name": "disk-sup", "kind": "supervised",
             "dataset": {"source": "manifest", "path": "data.json"}},
    "train": {}
  })";

  const ExperimentConfig ec = load_experiment_config((dir / "exp.json").string());
  CHECK(ec.task.dataset.name == "disk");
  CHECK(ec.task.dataset.size() == 20);
  CHECK(ec.task.dataset.images.data == ds.images.data);
  CHECK(ec.task.dataset.train_idx.size() == 10);

  SUBCASE("absent config file is an IoError") {
    CHECK_THROWS_AS(load_experiment_config((dir / "nope.json").string()), IoError);
  }

  SUBCASE("absent manifest target is an IoError naming the resolved path") {
    std::ofstream((dir / "dangling.json").string()) << R"({
      "out_dir": "/tmp/x",
      "model": {},
      "task": {"name": "a", "kind": "supervised",
               "dataset": {"source": "manifest", "path": "missing.json"}},
      "train": {}
    })";
    CHECK_THROWS_AS(load_experiment_config((dir / "dangling.json").string()), IoError);
  }

  fs::remove_all(dir);
}
