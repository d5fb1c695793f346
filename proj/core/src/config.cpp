#include "implab/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "implab/errors.hpp"

namespace implab {

namespace {

using nlohmann::json;

std::pair<std::size_t, std::size_t> line_col_of(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

// Strict object view: every key must be consumed by at() / opt(), and
// finish() rejects whatever is left over, naming it by JSON path.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected a JSON object");
  }

  const json& at(const char* key) {
    seen_.insert(key);
    auto it = j_->find(key);
    if (it == j_->end()) throw ConfigError(path_ + "." + key + ": missing required field");
    return *it;
  }

  const json* opt(const char* key) {
    seen_.insert(key);
    auto it = j_->find(key);
    return it == j_->end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : j_->items()) {
      if (seen_.count(item.key()) == 0) {
        throw ConfigError(path_ + "." + item.key() + ": unknown key");
      }
    }
  }

  std::string sub(const char* key) const { return path_ + "." + key; }

 private:
  const json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string get_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  return j.get<std::string>();
}

bool get_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
  return j.get<bool>();
}

double get_double(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

std::uint64_t get_u64(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) {
    return static_cast<std::uint64_t>(j.get<std::int64_t>());
  }
  throw ConfigError(path + ": expected a non-negative integer");
}

std::size_t get_size(const json& j, const std::string& path) {
  return static_cast<std::size_t>(get_u64(j, path));
}

std::vector<std::uint64_t> get_u64_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<std::uint64_t> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(get_u64(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

std::vector<std::size_t> get_size_list(const json& j, const std::string& path) {
  std::vector<std::size_t> out;
  for (std::uint64_t v : get_u64_list(j, path)) out.push_back(static_cast<std::size_t>(v));
  return out;
}

HeadKind parse_head_kind(const json& j, const std::string& path) {
  const std::string s = get_string(j, path);
  if (s == "classifier") return HeadKind::Classifier;
  if (s == "projector") return HeadKind::Projector;
  throw ConfigError(path + ": unknown head '" + s + "' (expected classifier|projector)");
}

TaskKind parse_task_kind(const json& j, const std::string& path) {
  const std::string s = get_string(j, path);
  if (s == "supervised") return TaskKind::Supervised;
  if (s == "ntxent") return TaskKind::NtXent;
  if (s == "momentum_queue") return TaskKind::MomentumQueue;
  throw ConfigError(path + ": unknown task kind '" + s +
                    "' (expected supervised|ntxent|momentum_queue)");
}

ScheduleKind parse_schedule_kind(const json& j, const std::string& path) {
  const std::string s = get_string(j, path);
  if (s == "fixed") return ScheduleKind::Fixed;
  if (s == "step") return ScheduleKind::Step;
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "warmup_step") return ScheduleKind::WarmupStep;
  throw ConfigError(path + ": unknown schedule kind '" + s +
                    "' (expected fixed|step|cosine|warmup_step)");
}

RewindMode parse_rewind_mode(const json& j, const std::string& path) {
  const std::string s = get_string(j, path);
  if (s == "pretrained") return RewindMode::Pretrained;
  if (s == "random") return RewindMode::Random;
  if (s == "early") return RewindMode::Early;
  throw ConfigError(path + ": unknown rewind mode '" + s + "' (expected pretrained|random|early)");
}

ModelConfig parse_model(const json& j, const std::string& path) {
  Obj o(j, path);
  ModelConfig m;
  if (const json* v = o.opt("width")) m.width = get_size(*v, o.sub("width"));
  if (const json* v = o.opt("depth")) m.depth = get_size(*v, o.sub("depth"));
  if (const json* v = o.opt("in_channels")) m.in_channels = get_size(*v, o.sub("in_channels"));
  if (const json* v = o.opt("use_batchnorm")) {
    m.use_batchnorm = get_bool(*v, o.sub("use_batchnorm"));
  }
  if (const json* v = o.opt("head")) m.head_kind = parse_head_kind(*v, o.sub("head"));
  if (const json* v = o.opt("head_arg")) m.head_arg = get_size(*v, o.sub("head_arg"));
  o.finish();
  return m;
}

Schedule parse_schedule(const json& j, const std::string& path) {
  Obj o(j, path);
  Schedule s;
  s.kind = parse_schedule_kind(o.at("kind"), o.sub("kind"));
  if (const json* v = o.opt("milestones")) s.milestones = get_size_list(*v, o.sub("milestones"));
  if (const json* v = o.opt("factor")) s.factor = get_double(*v, o.sub("factor"));
  if (const json* v = o.opt("lr_min")) s.lr_min = get_double(*v, o.sub("lr_min"));
  if (const json* v = o.opt("warmup_iters")) {
    s.warmup_iters = get_size(*v, o.sub("warmup_iters"));
  }
  o.finish();
  return s;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  Obj o(j, path);
  TrainConfig t;
  if (const json* v = o.opt("epochs")) t.epochs = get_size(*v, o.sub("epochs"));
  if (const json* v = o.opt("batch_size")) t.batch_size = get_size(*v, o.sub("batch_size"));
  if (const json* v = o.opt("lr")) t.lr = get_double(*v, o.sub("lr"));
  if (const json* v = o.opt("momentum")) t.momentum = get_double(*v, o.sub("momentum"));
  if (const json* v = o.opt("weight_decay")) {
    t.weight_decay = get_double(*v, o.sub("weight_decay"));
  }
  if (const json* v = o.opt("schedule")) t.schedule = parse_schedule(*v, o.sub("schedule"));
  o.finish();
  return t;
}

AugPolicy parse_aug(const json& j, const std::string& path) {
  Obj o(j, path);
  AugPolicy a;
  if (const json* v = o.opt("crop_lo")) a.crop_lo = get_double(*v, o.sub("crop_lo"));
  if (const json* v = o.opt("crop_hi")) a.crop_hi = get_double(*v, o.sub("crop_hi"));
  if (const json* v = o.opt("flip_prob")) a.flip_prob = get_double(*v, o.sub("flip_prob"));
  if (const json* v = o.opt("noise_sigma")) a.noise_sigma = get_double(*v, o.sub("noise_sigma"));
  if (const json* v = o.opt("channel_jitter")) {
    a.channel_jitter = get_double(*v, o.sub("channel_jitter"));
  }
  o.finish();
  return a;
}

Dataset parse_dataset(const json& j, const std::string& path, const std::string& base_dir) {
  Obj o(j, path);
  const std::string source = get_string(o.at("source"), o.sub("source"));
  if (source == "synth") {
    SynthSpec s;
    if (const json* v = o.opt("n")) s.n = get_size(*v, o.sub("n"));
    if (const json* v = o.opt("n_classes")) s.n_classes = get_size(*v, o.sub("n_classes"));
    if (const json* v = o.opt("resolution")) s.resolution = get_size(*v, o.sub("resolution"));
    if (const json* v = o.opt("channels")) s.channels = get_size(*v, o.sub("channels"));
    if (const json* v = o.opt("train_fraction")) {
      s.train_fraction = get_double(*v, o.sub("train_fraction"));
    }
    if (const json* v = o.opt("template_seed")) {
      s.template_seed = get_u64(*v, o.sub("template_seed"));
    }
    if (const json* v = o.opt("sample_seed")) s.sample_seed = get_u64(*v, o.sub("sample_seed"));
    if (const json* v = o.opt("domain_shift")) {
      s.domain_shift = get_bool(*v, o.sub("domain_shift"));
    }
    if (const json* v = o.opt("noise_sigma")) s.noise_sigma = get_double(*v, o.sub("noise_sigma"));
    if (const json* v = o.opt("name")) s.name = get_string(*v, o.sub("name"));
    o.finish();
    return synth_dataset(s);
  }
  if (source == "manifest") {
    std::filesystem::path p = get_string(o.at("path"), o.sub("path"));
    o.finish();
    if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
    return load_manifest(p.string());
  }
  throw ConfigError(o.sub("source") + ": unknown dataset source '" + source +
                    "' (expected synth|manifest)");
}

TaskSpec parse_task(const json& j, const std::string& path, const std::string& base_dir) {
  Obj o(j, path);
  TaskSpec t;
  t.name = get_string(o.at("name"), o.sub("name"));
  t.kind = parse_task_kind(o.at("kind"), o.sub("kind"));
  t.dataset = parse_dataset(o.at("dataset"), o.sub("dataset"), base_dir);
  if (const json* v = o.opt("temperature")) t.temperature = get_double(*v, o.sub("temperature"));
  if (const json* v = o.opt("queue_size")) t.queue_size = get_size(*v, o.sub("queue_size"));
  if (const json* v = o.opt("momentum")) t.momentum_coef = get_double(*v, o.sub("momentum"));
  if (const json* v = o.opt("augment")) t.aug = parse_aug(*v, o.sub("augment"));
  if (const json* v = o.opt("augment_supervised")) {
    t.augment_supervised = get_bool(*v, o.sub("augment_supervised"));
  }
  if (const json* v = o.opt("eval_pairs")) t.eval_pairs = get_size(*v, o.sub("eval_pairs"));
  o.finish();
  return t;
}

ImpConfig parse_imp(const json& j, const std::string& path) {
  Obj o(j, path);
  ImpConfig c;
  if (const json* v = o.opt("rounds")) c.rounds = get_size(*v, o.sub("rounds"));
  if (const json* v = o.opt("prune_fraction")) {
    c.prune_fraction = get_double(*v, o.sub("prune_fraction"));
  }
  if (const json* v = o.opt("rewind")) {
    Obj r(*v, o.sub("rewind"));
    c.rewind.mode = parse_rewind_mode(r.at("mode"), r.sub("mode"));
    if (const json* w = r.opt("r_percent")) {
      c.rewind.r_percent = get_double(*w, r.sub("r_percent"));
    }
    r.finish();
  }
  o.finish();
  return c;
}

}  // namespace

void ImpConfig::validate() const {
  if (rounds == 0) throw ConfigError("imp.rounds must be >= 1");
  if (!(prune_fraction > 0.0 && prune_fraction < 1.0)) {
    throw ConfigError("imp.prune_fraction must lie in (0, 1)");
  }
  rewind.validate();
}

void ExperimentConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir must be non-empty");
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  model.validate();
  train.validate();
  task.validate(train.batch_size);
  imp.validate();

  // The model head must fit the pre-training task; transfer runs swap heads
  // themselves, so only the primary task is constrained.
  if (task.kind == TaskKind::Supervised) {
    if (model.head_kind != HeadKind::Classifier) {
      throw ConfigError("task.kind=supervised requires model.head=classifier");
    }
    if (model.head_arg != task.dataset.n_classes) {
      throw ConfigError("model.head_arg (" + std::to_string(model.head_arg) +
                        ") must equal the supervised task's class count (" +
                        std::to_string(task.dataset.n_classes) + ")");
    }
  } else if (model.head_kind != HeadKind::Projector) {
    throw ConfigError("contrastive tasks require model.head=projector");
  }

  if (task.dataset.images.shape.size() == 4 &&
      task.dataset.images.shape[1] != model.in_channels) {
    throw ConfigError("task dataset has " + std::to_string(task.dataset.images.shape[1]) +
                      " channels but model.in_channels is " + std::to_string(model.in_channels));
  }

  if (has_downstream) {
    downstream_train.validate();
    downstream_task.validate(downstream_train.batch_size);
    if (downstream_task.dataset.images.shape.size() == 4 &&
        downstream_task.dataset.images.shape[1] != model.in_channels) {
      throw ConfigError("downstream task channel count does not match model.in_channels");
    }
  }
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col_of(text, e.byte);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": JSON syntax error: " + e.what());
  }

  const std::string base_dir = std::filesystem::path(origin).parent_path().string();

  Obj o(doc, "$");
  ExperimentConfig ec;
  ec.out_dir = get_string(o.at("out_dir"), o.sub("out_dir"));
  if (const json* v = o.opt("seed")) ec.seed = get_u64(*v, o.sub("seed"));
  if (const json* v = o.opt("seeds")) {
    ec.seeds = get_u64_list(*v, o.sub("seeds"));
  }
  ec.model = parse_model(o.at("model"), o.sub("model"));
  ec.task = parse_task(o.at("task"), o.sub("task"), base_dir);
  ec.train = parse_train(o.at("train"), o.sub("train"));
  ec.downstream_train = ec.train;
  if (const json* v = o.opt("downstream_task")) {
    ec.downstream_task = parse_task(*v, o.sub("downstream_task"), base_dir);
    ec.has_downstream = true;
  }
  if (const json* v = o.opt("downstream_train")) {
    ec.downstream_train = parse_train(*v, o.sub("downstream_train"));
  }
  if (const json* v = o.opt("imp")) ec.imp = parse_imp(*v, o.sub("imp"));
  o.finish();

  ec.train.seed = ec.seed;
  ec.downstream_train.seed = ec.seed;
  ec.validate();
  return ec;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) throw IoError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) throw IoError("read failed: " + path);
  return parse_experiment_config(ss.str(), path);
}

}  // namespace implab
