// implab — command line driver for the lottery-ticket experimentation
// engine: pretrain -> imp -> transfer -> report, plus direct mask algebra
// and the temperature/width ablation sweep.
//
// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
// All failures print a single machine-parsable `error: ...` line to stderr.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "implab/config.hpp"
#include "implab/errors.hpp"
#include "implab/experiment.hpp"
#include "implab/imp.hpp"
#include "implab/maskops.hpp"
#include "implab/network.hpp"
#include "implab/store.hpp"
#include "implab/tasks.hpp"
#include "implab/training.hpp"

namespace {

namespace fs = std::filesystem;
using namespace implab;

// Relative output paths resolve under $IMPLAB_OUT when it is set.
std::string resolve_out(const std::string& dir) {
  if (dir.empty() || fs::path(dir).is_absolute()) return dir;
  const char* root = std::getenv("IMPLAB_OUT");
  if (root == nullptr || *root == '\0') return dir;
  return (fs::path(root) / dir).string();
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

Mask dense_mask(const ParamStore& params) {
  return Mask::ones(params.d1(), params.layout_hash());
}

Checkpoint make_ckpt(const ModelConfig& mc, const ParamStore& params, const Mask& mask,
                     std::uint64_t seed, std::uint64_t round, std::uint64_t epoch,
                     const std::string& task_id, const std::string& parent_id) {
  Checkpoint c;
  c.config = mc;
  c.params = params;
  c.mask = mask;
  c.opt = make_opt_state(params);
  c.rng_seed = seed;
  c.rng_counter = 0;
  c.round = round;
  c.epoch = epoch;
  c.task_id = task_id;
  c.parent_id = parent_id;
  return c;
}

struct SeedOverride {
  bool set = false;
  std::uint64_t value = 0;

  void apply(ExperimentConfig& ec) const {
    if (!set) return;
    ec.seed = value;
    ec.train.seed = value;
    ec.downstream_train.seed = value;
  }
};

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(const std::string& config_path, const SeedOverride& seed) {
  ExperimentConfig ec = load_experiment_config(config_path);
  seed.apply(ec);

  const fs::path out = resolve_out(ec.out_dir);
  fs::create_directories(out);

  Rng init_rng = Rng(ec.seed).derive("init");
  Model model = build_model(ec.model, init_rng);
  const Mask dense = dense_mask(model.params);

  const std::string theta0_path = (out / "theta_0.ckpt").string();
  save_checkpoint(make_ckpt(ec.model, model.params, dense, ec.seed, 0, 0, ec.task.name, ""),
                  theta0_path);

  const std::size_t early = early_rewind_epoch(ec.imp.rewind.r_percent, ec.train.epochs);
  ParamStore early_params;
  const TrainHistory hist =
      train(model, dense, ec.task, ec.train, &std::cerr, early, &early_params);

  const std::string early_path = (out / "theta_early.ckpt").string();
  save_checkpoint(make_ckpt(ec.model, early_params, dense, ec.seed, 0, early, ec.task.name,
                            "theta_0.ckpt"),
                  early_path);

  const std::string final_path = (out / "theta_p.ckpt").string();
  save_checkpoint(make_ckpt(ec.model, model.params, dense, ec.seed, 0, ec.train.epochs,
                            ec.task.name, "theta_0.ckpt"),
                  final_path);

  std::cout << "saved " << theta0_path << "\n";
  std::cout << "saved " << early_path << " (epoch " << early << ")\n";
  std::cout << "saved " << final_path << "\n";
  if (!hist.epochs.empty()) {
    std::cout << "final loss=" << hist.epochs.back().loss
              << " metric=" << hist.epochs.back().metric << "\n";
  }
  return 0;
}

// --------------------------------------------------------------------- imp

int cmd_imp(const std::string& config_path, const std::string& source_path,
            const std::string& rewind_source_path, const std::string& tag,
            std::size_t rounds_override, const SeedOverride& seed) {
  ExperimentConfig ec = load_experiment_config(config_path);
  seed.apply(ec);

  const Checkpoint source = load_checkpoint(source_path);

  ImpOptions opts;
  opts.rounds = rounds_override > 0 ? rounds_override : ec.imp.rounds;
  opts.prune_fraction = ec.imp.prune_fraction;
  opts.out_dir = resolve_out(ec.out_dir);
  opts.tag = tag;
  if (ec.imp.rewind.mode == RewindMode::Pretrained) {
    opts.rewind_source = source.params;
  } else {
    if (rewind_source_path.empty()) {
      throw ConfigError("rewind mode '" + rewind_mode_name(ec.imp.rewind.mode) +
                        "' needs --rewind-source <ckpt> (theta_0 or theta_early)");
    }
    opts.rewind_source = load_checkpoint(rewind_source_path).params;
  }

  fs::create_directories(opts.out_dir);
  TrainConfig tc = ec.train;
  tc.seed = ec.seed;
  const std::vector<ImpRoundResult> rounds = imp_run(source, ec.task, tc, opts, &std::cerr);

  for (const ImpRoundResult& r : rounds) {
    std::cout << "round=" << r.round << " sparsity=" << r.sparsity
              << " trained_metric=" << r.trained_metric << " mask=" << r.mask_path
              << " ckpt=" << r.ckpt_path << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- transfer

int cmd_transfer(const std::string& config_path, const std::string& source_path,
                 const std::string& mask_path, const std::string& init_name,
                 const std::string& task_name, std::string arm_name,
                 const SeedOverride& seed) {
  ExperimentConfig ec = load_experiment_config(config_path);
  seed.apply(ec);

  const Checkpoint source = load_checkpoint(source_path);
  const RewindMode init_mode = rewind_mode_from(init_name);

  // Pick the downstream task by name; default to the designated downstream
  // task when the config declares one.
  const TaskSpec* task = nullptr;
  if (task_name.empty()) {
    task = ec.has_downstream ? &ec.downstream_task : &ec.task;
  } else if (task_name == ec.task.name) {
    task = &ec.task;
  } else if (ec.has_downstream && task_name == ec.downstream_task.name) {
    task = &ec.downstream_task;
  } else {
    throw ConfigError("no task named '" + task_name + "' in this config");
  }

  Mask mask = mask_path.empty() ? dense_mask(source.params) : load_mask(mask_path);
  const std::string mask_id = mask_path.empty() ? "dense" : stem_of(mask_path);
  if (arm_name.empty()) arm_name = "mask=" + mask_id + "+init=" + rewind_mode_name(init_mode);

  const fs::path out = resolve_out(ec.out_dir);
  fs::create_directories(out);
  ResultsLog log((out / "results.csv").string());

  TrainConfig tc = ec.downstream_train;
  std::vector<double> metrics;
  for (std::uint64_t s : ec.seeds) {
    RunRecord skel;
    skel.arm = arm_name;
    skel.task = task->name;
    skel.mask_id = mask_id;
    skel.sparsity = mask.sparsity();
    skel.init = rewind_mode_name(init_mode);
    skel.seed = s;
    if (log.contains(skel)) {
      std::cerr << "seed " << s << " already recorded; skipping\n";
      continue;
    }
    const RunRecord rec =
        run_transfer_arm(arm_name, source, mask, mask_id, init_mode, *task, tc, s, &std::cerr);
    log.append(rec);
    metrics.push_back(rec.metric);
    std::cout << "arm=" << rec.arm << " task=" << rec.task << " seed=" << rec.seed
              << " sparsity=" << rec.sparsity << " metric=" << rec.metric << "\n";
  }
  if (!metrics.empty()) {
    const Aggregate a = aggregate(metrics);
    std::cout << "aggregate mean=" << a.mean << " std=" << a.std << " n_seeds=" << a.n_seeds
              << "\n";
  }
  std::cout << "results=" << log.path() << "\n";
  return 0;
}

// ----------------------------------------------------------------- maskops

int cmd_mask_complement(const std::string& in, const std::string& out) {
  const Mask c = complement(load_mask(in));
  save_mask(c, out);
  std::cout << "wrote " << out << " sparsity=" << c.sparsity() << "\n";
  return 0;
}

int cmd_mask_random(const std::string& like, const std::string& source, double sparsity,
                    std::uint64_t seed, const std::string& out) {
  std::size_t n_bits = 0;
  std::uint64_t layout = 0;
  if (!like.empty()) {
    const Mask ref = load_mask(like);
    n_bits = ref.size();
    layout = ref.layout_id();
  } else if (!source.empty()) {
    const Checkpoint c = load_checkpoint(source);
    n_bits = c.params.d1();
    layout = c.params.layout_hash();
  } else {
    throw ConfigError("random mask needs --like <mask> or --source <ckpt> for the layout");
  }
  Rng rng(seed);
  const Mask m = random_mask(n_bits, layout, sparsity, rng);
  save_mask(m, out);
  std::cout << "wrote " << out << " survivors=" << m.popcount() << "/" << n_bits << "\n";
  return 0;
}

int cmd_mask_perturb(const std::string& in, double rho, std::uint64_t seed,
                     const std::string& out) {
  const Mask m = load_mask(in);
  Rng rng(seed);
  const Mask p = perturb(m, rho, rng);
  save_mask(p, out);
  std::cout << "wrote " << out << " hamming=" << hamming_distance(m, p)
            << " popcount=" << p.popcount() << "\n";
  return 0;
}

int cmd_mask_similarity(const std::string& a_path, const std::string& b_path) {
  const Mask a = load_mask(a_path);
  const Mask b = load_mask(b_path);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", relative_similarity(a, b));
  std::cout << "similarity=" << buf << "\n";
  return 0;
}

int cmd_mask_zerokernels(const std::string& mask_path, const std::string& source,
                         const std::string& out_dir) {
  const Mask mask = load_mask(mask_path);
  const Checkpoint c = load_checkpoint(source);
  const KernelMap map = zero_kernels(mask, c.params);
  const std::string dir = resolve_out(out_dir);
  fs::create_directories(dir);
  heatmap_export(map, dir);
  for (const KernelLayerMap& layer : map) {
    std::cout << "layer=" << layer.layer << " zero_kernels=" << layer.zero_count << "/"
              << layer.out_channels * layer.in_channels << "\n";
  }
  std::cout << "wrote " << dir << "\n";
  return 0;
}

// ------------------------------------------------------------------ report

int cmd_report(const std::string& dir) {
  const std::string d = resolve_out(dir);
  write_report(d);
  std::cout << "wrote " << (fs::path(d) / "summary.json").string() << "\n";
  std::cout << "wrote " << (fs::path(d) / "curves.csv").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------- sweep

int cmd_sweep(const std::string& config_path, std::vector<double> taus,
              std::vector<std::size_t> widths, std::vector<std::size_t> rounds,
              std::size_t jobs, std::size_t epochs_override, const SeedOverride& seed) {
  ExperimentConfig ec = load_experiment_config(config_path);
  seed.apply(ec);
  if (ec.task.kind == TaskKind::Supervised) {
    throw ConfigError("sweep varies the softmax temperature; configure a contrastive task");
  }
  if (widths.empty()) widths = {ec.model.width};
  if (rounds.empty()) rounds = {0};
  if (epochs_override > 0) ec.train.epochs = epochs_override;

  SweepPlan plan;
  plan.task_name = ec.task.name;
  plan.epochs = ec.train.epochs;
  plan.prune_fraction = ec.imp.prune_fraction;
  plan.temperatures = std::move(taus);
  plan.widths = std::move(widths);
  plan.rounds = std::move(rounds);
  // Sweep cells train from scratch; non-zero rounds use seed-derived random
  // masks at the ladder sparsity (an architecture ablation, not IMP masks).
  plan.init_modes = {RewindMode::Random};
  plan.seeds = ec.seeds;

  const fs::path out = resolve_out(ec.out_dir);
  fs::create_directories(out);
  ResultsLog log((out / "results.csv").string());

  const ExperimentConfig& cfg = ec;
  CellRunner runner = [&cfg](const SweepCell& cell) -> double {
    ModelConfig mc = cfg.model;
    mc.width = cell.width;
    TaskSpec task = cfg.task;
    task.temperature = cell.temperature;

    Rng cell_rng(cell.seed);
    Rng init_rng = cell_rng.derive("sweep-init", cell.width);
    Model model = build_model(mc, init_rng);
    Mask mask = Mask::ones(model.params.d1(), model.params.layout_hash());
    if (cell.round > 0) {
      Rng mask_rng = cell_rng.derive("sweep-mask", cell.round);
      mask = random_mask(model.params.d1(), model.params.layout_hash(),
                         sparsity_at_round(cell.round, cfg.imp.prune_fraction), mask_rng);
    }
    TrainConfig tc = cfg.train;
    tc.seed = cell.seed;
    train(model, mask, task, tc);
    return evaluate(model, mask, task);
  };

  const std::size_t ran = sweep(plan, runner, log, jobs);
  std::cout << "cells_run=" << ran << " total_rows=" << log.records().size() << " results="
            << log.path() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lottery-ticket experimentation engine"};
  app.require_subcommand(1);

  std::string config_path, source_path, rewind_source_path, mask_path, task_name, arm_name;
  std::string init_name = "pretrained";
  std::string tag = "imp";
  std::string in_path, out_path, like_path, a_path, b_path, dir_path, out_dir;
  double sparsity = 0.8;
  double rho = 0.1;
  std::uint64_t mask_seed = 1;
  std::size_t rounds_override = 0;
  std::size_t jobs = 1;
  std::size_t epochs_override = 0;
  std::vector<double> taus{0.1, 0.2, 0.5, 1.0, 2.0, 10.0, 20.0};
  std::vector<std::size_t> widths;
  std::vector<std::size_t> round_list;
  SeedOverride seed;

  auto add_seed = [&seed](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&seed](const std::uint64_t& v) {
          seed.set = true;
          seed.value = v;
        },
        "override the config seed");
  };

  CLI::App* pre = app.add_subcommand("pretrain", "train a dense model; save theta_0/early/p");
  pre->add_option("--config", config_path, "experiment config JSON")->required();
  add_seed(pre);

  CLI::App* imp = app.add_subcommand("imp", "iterative magnitude pruning from a checkpoint");
  imp->add_option("--config", config_path, "experiment config JSON")->required();
  imp->add_option("--source", source_path, "starting checkpoint (theta_p)")->required();
  imp->add_option("--rewind-source", rewind_source_path,
                  "checkpoint for random/early rewind targets");
  imp->add_option("--tag", tag, "output file prefix");
  imp->add_option("--rounds", rounds_override, "override imp.rounds");
  add_seed(imp);

  CLI::App* tr = app.add_subcommand("transfer", "train one transfer arm over the config seeds");
  tr->add_option("--config", config_path, "experiment config JSON")->required();
  tr->add_option("--source", source_path, "init checkpoint for the chosen mode")->required();
  tr->add_option("--mask", mask_path, "mask file (omit for the dense baseline)");
  tr->add_option("--init", init_name, "init label: pretrained|random|early");
  tr->add_option("--task", task_name, "task name from the config (default: downstream)");
  tr->add_option("--arm", arm_name, "arm label in the results CSV");
  add_seed(tr);

  CLI::App* mo = app.add_subcommand("maskops", "mask algebra on files");
  mo->require_subcommand(1);
  CLI::App* mc = mo->add_subcommand("complement", "flip every bit");
  mc->add_option("--in", in_path, "input mask")->required();
  mc->add_option("--out", out_path, "output mask")->required();
  CLI::App* mr = mo->add_subcommand("random", "fresh random mask at a target sparsity");
  mr->add_option("--like", like_path, "mask file supplying bit count + layout");
  mr->add_option("--source", source_path, "checkpoint supplying the layout");
  mr->add_option("--sparsity", sparsity, "fraction of bits to zero")->required();
  mr->add_option("--seed", mask_seed, "rng seed");
  mr->add_option("--out", out_path, "output mask")->required();
  CLI::App* mp = mo->add_subcommand("perturb", "flip rho of the ones and rho of the zeros");
  mp->add_option("--in", in_path, "input mask")->required();
  mp->add_option("--rho", rho, "perturbation fraction")->required();
  mp->add_option("--seed", mask_seed, "rng seed");
  mp->add_option("--out", out_path, "output mask")->required();
  CLI::App* ms = mo->add_subcommand("similarity", "Jaccard similarity of two masks");
  ms->add_option("--a", a_path, "first mask")->required();
  ms->add_option("--b", b_path, "second mask")->required();
  CLI::App* mz = mo->add_subcommand("zerokernels", "per-layer zero-kernel maps");
  mz->add_option("--mask", mask_path, "mask file")->required();
  mz->add_option("--source", source_path, "checkpoint defining the layers")->required();
  mz->add_option("--out-dir", out_dir, "directory for PGM heatmaps + CSV")->required();

  CLI::App* rp = app.add_subcommand("report", "aggregate results.csv into summary + curves");
  rp->add_option("--dir", dir_path, "results directory")->required();

  CLI::App* sw = app.add_subcommand("sweep", "temperature/width ablation grid");
  sw->add_option("--config", config_path, "experiment config JSON")->required();
  sw->add_option("--taus", taus, "temperature grid")->delimiter(',');
  sw->add_option("--widths", widths, "backbone widths")->delimiter(',');
  sw->add_option("--rounds", round_list, "sparsity ladder rounds")->delimiter(',');
  sw->add_option("--jobs", jobs, "parallel cell workers");
  sw->add_option("--epochs", epochs_override, "override train.epochs");
  add_seed(sw);

  try {
    app.parse(argc, argv);

    if (app.got_subcommand(pre)) return cmd_pretrain(config_path, seed);
    if (app.got_subcommand(imp)) {
      return cmd_imp(config_path, source_path, rewind_source_path, tag, rounds_override, seed);
    }
    if (app.got_subcommand(tr)) {
      return cmd_transfer(config_path, source_path, mask_path, init_name, task_name, arm_name,
                          seed);
    }
    if (app.got_subcommand(mo)) {
      if (mo->got_subcommand(mc)) return cmd_mask_complement(in_path, out_path);
      if (mo->got_subcommand(mr)) {
        return cmd_mask_random(like_path, source_path, sparsity, mask_seed, out_path);
      }
      if (mo->got_subcommand(mp)) return cmd_mask_perturb(in_path, rho, mask_seed, out_path);
      if (mo->got_subcommand(ms)) return cmd_mask_similarity(a_path, b_path);
      if (mo->got_subcommand(mz)) return cmd_mask_zerokernels(mask_path, source_path, out_dir);
    }
    if (app.got_subcommand(rp)) return cmd_report(dir_path);
    if (app.got_subcommand(sw)) {
      return cmd_sweep(config_path, taus, widths, round_list, jobs, epochs_override, seed);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
