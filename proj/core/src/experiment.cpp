#include "implab/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "implab/errors.hpp"
#include "implab/network.hpp"

namespace implab {

namespace {

std::string fmt_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

std::string fmt_sparsity(double s) { return fmt_double("%.6f", s); }
std::string fmt_metric(double m) { return fmt_double("%.17g", m); }

// String fields travel through an unquoted CSV, so the delimiter set is
// banned outright rather than escaped.
void require_plain_field(const std::string& value, const char* what) {
  for (char c : value) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r') {
      throw ConfigError(std::string(what) + " may not contain commas, quotes, or newlines: '" +
                        value + "'");
    }
  }
  if (value.empty()) throw ConfigError(std::string(what) + " must be non-empty");
}

constexpr const char* kResultsHeader = "arm,task,mask_id,sparsity,init,seed,metric,epochs";

std::string csv_row(const RunRecord& r) {
  std::string row = r.arm;
  row += ',';
  row += r.task;
  row += ',';
  row += r.mask_id;
  row += ',';
  row += fmt_sparsity(r.sparsity);
  row += ',';
  row += r.init;
  row += ',';
  row += std::to_string(r.seed);
  row += ',';
  row += fmt_metric(r.metric);
  row += ',';
  row += std::to_string(r.epochs);
  return row;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double_field(const std::string& s, const std::string& path, std::size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty()) {
    throw IoError(path + ":" + std::to_string(line_no) + ": malformed number '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64_field(const std::string& s, const std::string& path,
                              std::size_t line_no) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || s.empty()) {
    throw IoError(path + ":" + std::to_string(line_no) + ": malformed integer '" + s + "'");
  }
  return static_cast<std::uint64_t>(v);
}

}  // namespace

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw DimensionError("aggregate: need at least one value");
  Aggregate a;
  a.n_seeds = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

bool is_matching(const Aggregate& sub, const Aggregate& dense) {
  return sub.mean >= dense.mean - dense.std;
}

bool is_winning_ticket(const Aggregate& sub, const Aggregate& dense, RewindMode init) {
  return is_matching(sub, dense) && init == RewindMode::Pretrained;
}

bool is_universal(const std::vector<TaskOutcome>& outcomes, std::ostream* warn) {
  if (outcomes.empty()) {
    if (warn != nullptr) {
      *warn << "warning: universality judged over an empty task set (vacuously true)\n";
    }
    return true;
  }
  for (const TaskOutcome& o : outcomes) {
    if (!is_matching(o.sub, o.dense)) return false;
  }
  return true;
}

RunRecord run_transfer_arm(const std::string& arm_name, const Checkpoint& source,
                           const Mask& mask, const std::string& mask_id, RewindMode init_mode,
                           const TaskSpec& task, const TrainConfig& config, std::uint64_t seed,
                           std::ostream* progress) {
  const auto t0 = std::chrono::steady_clock::now();

  Model model = model_with_params(source.config, source.params);

  // The downstream task dictates the head; the backbone keeps the source
  // initialization. A same-shape head is still freshly initialized, since the
  // task is new.
  HeadKind want_kind = HeadKind::Classifier;
  std::size_t want_arg = 0;
  if (task.kind == TaskKind::Supervised) {
    want_kind = HeadKind::Classifier;
    want_arg = task.dataset.n_classes;
  } else {
    want_kind = HeadKind::Projector;
    want_arg = source.config.head_kind == HeadKind::Projector ? source.config.head_arg
                                                              : source.config.width;
  }
  Rng head_rng = Rng(seed).derive("transfer-head");
  if (model.config.head_kind != want_kind || model.config.head_arg != want_arg) {
    swap_head(model, want_kind, want_arg, head_rng);
  } else {
    reinit_head(model, head_rng);
  }
  apply_mask(model.params, mask);

  TrainConfig local = config;
  local.seed = seed;
  const TrainHistory history = train(model, mask, task, local, progress);

  RunRecord rec;
  rec.arm = arm_name;
  rec.task = task.name;
  rec.mask_id = mask_id;
  rec.sparsity = mask.sparsity();
  rec.init = rewind_mode_name(init_mode);
  rec.seed = seed;
  rec.metric = evaluate(model, mask, task);
  rec.epochs = history.epochs.size();
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<RunRecord> transfer_protocol(const std::string& arm_name, const Checkpoint& source,
                                         const Mask& mask, const std::string& mask_id,
                                         RewindMode init_mode,
                                         const std::vector<TaskSpec>& tasks,
                                         const TrainConfig& config,
                                         const std::vector<std::uint64_t>& seeds,
                                         std::ostream* progress) {
  if (tasks.empty()) throw ConfigError("transfer_protocol: task list is empty");
  if (seeds.empty()) throw ConfigError("transfer_protocol: seed list is empty");
  std::vector<RunRecord> out;
  out.reserve(tasks.size() * seeds.size());
  for (const TaskSpec& task : tasks) {
    for (std::uint64_t seed : seeds) {
      out.push_back(run_transfer_arm(arm_name, source, mask, mask_id, init_mode, task, config,
                                     seed, progress));
    }
  }
  return out;
}

std::string record_key(const RunRecord& r) {
  std::string key = r.arm;
  key += '\x1f';
  key += r.task;
  key += '\x1f';
  key += r.mask_id;
  key += '\x1f';
  key += fmt_sparsity(r.sparsity);
  key += '\x1f';
  key += r.init;
  key += '\x1f';
  key += std::to_string(r.seed);
  return key;
}

ResultsLog::ResultsLog(std::string csv_path) : path_(std::move(csv_path)) {
  std::ifstream in(path_);
  if (!in.is_open()) return;  // fresh log; file is created on first append
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != kResultsHeader) {
        throw IoError(path_ + ":1: unexpected header '" + line + "' (want '" + kResultsHeader +
                      "')");
      }
      continue;
    }
    const std::vector<std::string> f = split_fields(line);
    if (f.size() != 8) {
      throw IoError(path_ + ":" + std::to_string(line_no) + ": expected 8 fields, got " +
                    std::to_string(f.size()));
    }
    RunRecord r;
    r.arm = f[0];
    r.task = f[1];
    r.mask_id = f[2];
    r.sparsity = parse_double_field(f[3], path_, line_no);
    r.init = f[4];
    r.seed = parse_u64_field(f[5], path_, line_no);
    r.metric = parse_double_field(f[6], path_, line_no);
    r.epochs = static_cast<std::size_t>(parse_u64_field(f[7], path_, line_no));
    keys_.insert(record_key(r));
    records_.push_back(std::move(r));
  }
}

bool ResultsLog::contains(const RunRecord& r) const {
  std::lock_guard<std::mutex> lock(mu_);
  return keys_.count(record_key(r)) != 0;
}

void ResultsLog::append(const RunRecord& r) {
  require_plain_field(r.arm, "arm");
  require_plain_field(r.task, "task");
  require_plain_field(r.mask_id, "mask_id");
  require_plain_field(r.init, "init");

  std::lock_guard<std::mutex> lock(mu_);
  const std::string key = record_key(r);
  if (keys_.count(key) != 0) {
    throw ConfigError("results log already holds a record for key '" + r.arm + "/" + r.task +
                      "/" + r.mask_id + "/seed=" + std::to_string(r.seed) +
                      "' (check contains() before rerunning)");
  }

  const bool fresh = !std::filesystem::exists(path_);
  std::ofstream out(path_, std::ios::app);
  if (!out.is_open()) throw IoError("cannot open results log for append: " + path_);
  if (fresh) out << kResultsHeader << '\n';
  out << csv_row(r) << '\n';
  out.flush();
  if (!out.good()) throw IoError("write to results log failed: " + path_);

  keys_.insert(key);
  records_.push_back(r);
}

std::vector<RunRecord> ResultsLog::records() const {
  std::lock_guard<std::mutex> lock(mu_);
  return records_;
}

std::string summarize_json(const std::vector<RunRecord>& records) {
  // Group by (arm, task, sparsity) in first-appearance order.
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<double>> values;
  std::unordered_map<std::string, const RunRecord*> reps;
  for (const RunRecord& r : records) {
    std::string key = r.arm;
    key += '\x1f';
    key += r.task;
    key += '\x1f';
    key += fmt_sparsity(r.sparsity);
    auto it = values.find(key);
    if (it == values.end()) {
      order.push_back(key);
      reps[key] = &r;
      values[key] = {r.metric};
    } else {
      it->second.push_back(r.metric);
    }
  }

  nlohmann::ordered_json doc;
  doc["n_records"] = records.size();
  doc["groups"] = nlohmann::ordered_json::array();
  for (const std::string& key : order) {
    const RunRecord& rep = *reps.at(key);
    const Aggregate a = aggregate(values.at(key));
    nlohmann::ordered_json g;
    g["arm"] = rep.arm;
    g["task"] = rep.task;
    g["sparsity"] = rep.sparsity;
    g["mean"] = a.mean;
    g["std"] = a.std;
    g["n_seeds"] = a.n_seeds;
    doc["groups"].push_back(std::move(g));
  }
  return doc.dump(2) + "\n";
}

void write_report(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path results = fs::path(dir) / "results.csv";
  if (!fs::exists(results)) {
    throw IoError("no results.csv under '" + dir + "'; nothing to report");
  }
  const ResultsLog log(results.string());
  const std::vector<RunRecord> records = log.records();

  write_file_atomic((fs::path(dir) / "summary.json").string(), summarize_json(records));

  // curves.csv: one row per (arm, task, sparsity) group, sorted so the file
  // is independent of append order.
  std::map<std::string, std::map<std::string, std::map<double, std::vector<double>>>> curves;
  for (const RunRecord& r : records) {
    curves[r.arm][r.task][r.sparsity].push_back(r.metric);
  }
  std::string csv = "arm,task,sparsity,mean,std,n_seeds\n";
  for (const auto& [arm, by_task] : curves) {
    for (const auto& [task, by_sparsity] : by_task) {
      for (const auto& [sparsity, metrics] : by_sparsity) {
        const Aggregate a = aggregate(metrics);
        csv += arm;
        csv += ',';
        csv += task;
        csv += ',';
        csv += fmt_sparsity(sparsity);
        csv += ',';
        csv += fmt_metric(a.mean);
        csv += ',';
        csv += fmt_metric(a.std);
        csv += ',';
        csv += std::to_string(a.n_seeds);
        csv += '\n';
      }
    }
  }
  write_file_atomic((fs::path(dir) / "curves.csv").string(), csv);
}

std::size_t sweep(const SweepPlan& plan, const CellRunner& runner, ResultsLog& log,
                  std::size_t jobs) {
  if (!runner) throw ConfigError("sweep: cell runner must be set");
  if (plan.temperatures.empty() || plan.widths.empty() || plan.rounds.empty() ||
      plan.init_modes.empty() || plan.seeds.empty()) {
    throw ConfigError("sweep: every plan axis needs at least one value");
  }
  require_plain_field(plan.task_name, "task_name");
  if (!(plan.prune_fraction > 0.0 && plan.prune_fraction < 1.0)) {
    throw ConfigError("sweep: prune_fraction must lie in (0, 1)");
  }
  if (jobs == 0) jobs = 1;

  struct Pending {
    SweepCell cell;
    RunRecord rec;  // key fields filled; metric/wall to be completed
  };
  std::vector<Pending> pending;
  for (double tau : plan.temperatures) {
    for (std::size_t width : plan.widths) {
      for (std::size_t round : plan.rounds) {
        for (RewindMode mode : plan.init_modes) {
          for (std::uint64_t seed : plan.seeds) {
            SweepCell cell;
            cell.temperature = tau;
            cell.width = width;
            cell.round = round;
            cell.init = mode;
            cell.seed = seed;

            char mask_id[32];
            std::snprintf(mask_id, sizeof(mask_id), "round%02zu", round);
            RunRecord rec;
            rec.arm = "tau=" + fmt_double("%g", tau) + "+width=" + std::to_string(width);
            rec.task = plan.task_name;
            rec.mask_id = mask_id;
            rec.sparsity = sparsity_at_round(round, plan.prune_fraction);
            rec.init = rewind_mode_name(mode);
            rec.seed = seed;
            rec.epochs = plan.epochs;
            if (log.contains(rec)) continue;
            pending.push_back(Pending{cell, std::move(rec)});
          }
        }
      }
    }
  }
  if (pending.empty()) return 0;

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> completed{0};
  std::mutex err_mu;
  std::exception_ptr first_error;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      Pending& p = pending[i];
      try {
        const auto t0 = std::chrono::steady_clock::now();
        p.rec.metric = runner(p.cell);
        p.rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.append(p.rec);
        completed.fetch_add(1);
      } catch (...) {
        {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
        next.store(pending.size());  // stop handing out work
        return;
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    const std::size_t n_threads = std::min(jobs, pending.size());
    threads.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return completed.load();
}

}  // namespace implab
