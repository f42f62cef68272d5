// Command-line entry point: training, evaluation, paired baseline/TPR runs,
// density/trajectory export, theory witnesses, and the selftest battery.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "cnftpr/data.hpp"
#include "cnftpr/flow.hpp"
#include "cnftpr/selfcheck.hpp"
#include "cnftpr/tape.hpp"
#include "cnftpr/theory.hpp"
#include "cnftpr/train.hpp"

namespace fs = std::filesystem;
using namespace cnftpr;

namespace {

uint64_t default_seed() {
  if (const char* env = std::getenv("CNFTPR_SEED")) return std::strtoull(env, nullptr, 10);
  return 0;
}

// Pre-scan for --config so flags given on the command line override the file.
TrainConfig base_config(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") return load_config_json(argv[i + 1]);
  return TrainConfig::defaults();
}

void add_train_flags(CLI::App* cmd, TrainConfig& cfg, std::string& tpr_flag,
                     std::string& config_path) {
  cmd->add_option("--config", config_path, "JSON config file; flags override it")
      ->check(CLI::ExistingFile);
  cmd->add_option("--dataset", cfg.dataset, "rings|pinwheel|moons")
      ->check(CLI::IsMember({"rings", "pinwheel", "moons"}));
  cmd->add_option("--tpr", tpr_flag, "on|off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--alpha", cfg.tpr.alpha, "TPR coefficient");
  cmd->add_option("--degree", cfg.tpr.degree, "TPR polynomial degree");
  cmd->add_option("--num-taus", cfg.tpr.num_taus, "TPR sample times per iteration");
  cmd->add_option("--atol", cfg.solver_train.atol, "training solver atol");
  cmd->add_option("--rtol", cfg.solver_train.rtol, "training solver rtol");
  cmd->add_option("--eval-atol", cfg.solver_eval.atol, "evaluation solver atol");
  cmd->add_option("--eval-rtol", cfg.solver_eval.rtol, "evaluation solver rtol");
  cmd->add_option("--batch", cfg.batch_size, "batch size");
  cmd->add_option("--iters", cfg.iterations, "training iterations");
  cmd->add_option("--lr", cfg.lr, "Adam learning rate");
  cmd->add_option("--seed", cfg.seed, "run seed (CNFTPR_SEED env is the default)");
  cmd->add_option("--out", cfg.out_dir, "output directory");
  cmd->add_option("--eval-every", cfg.eval_every, "evaluate every N iterations (0: final only)");
  cmd->add_option("--trace", cfg.trace, "exact|hutchinson")
      ->check(CLI::IsMember({"exact", "hutchinson"}));
  cmd->add_option("--hutch-samples", cfg.hutchinson_samples, "Hutchinson probes per solve");
  cmd->add_option("--test-points", cfg.test_points, "held-out evaluation points");
}

int run_theory_table() {
  bool all = true;
  for (const CheckResult& r : run_theory_checks()) {
    std::printf("%-36s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.detail.c_str());
    all = all && r.pass;
  }
  return all ? 0 : 2;
}

int run_selftest_table(const SelftestOptions& opt) {
  bool all = true;
  for (const CheckResult& r : run_selftest(opt)) {
    std::printf("%-36s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.detail.c_str());
    all = all && r.pass;
  }
  return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous normalizing flow trainer with trajectory polynomial "
               "regularization"};
  app.require_subcommand(1);

  TrainConfig cfg;
  try {
    cfg = base_config(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (cfg.seed == 0) cfg.seed = default_seed();
  std::string tpr_flag = cfg.tpr_enabled ? "on" : "off";
  std::string config_path;

  auto* cmd_train = app.add_subcommand("train", "train one run");
  add_train_flags(cmd_train, cfg, tpr_flag, config_path);

  auto* cmd_paired =
      app.add_subcommand("paired-run", "train baseline and TPR arms with one seed");
  add_train_flags(cmd_paired, cfg, tpr_flag, config_path);
  bool sequential = false;
  cmd_paired->add_flag("--sequential", sequential, "run the two arms one after the other");

  std::string ckpt_path, eval_dataset = "rings", out_file;
  uint64_t eval_seed = default_seed();
  int test_points = 10000;
  double eval_atol = 1e-5, eval_rtol = 1e-5;
  auto* cmd_eval = app.add_subcommand("eval", "test NLL of a checkpoint");
  cmd_eval->add_option("--checkpoint", ckpt_path, "checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_eval->add_option("--dataset", eval_dataset, "rings|pinwheel|moons")
      ->check(CLI::IsMember({"rings", "pinwheel", "moons"}));
  cmd_eval->add_option("--seed", eval_seed, "test set seed");
  cmd_eval->add_option("--test-points", test_points, "held-out points");
  cmd_eval->add_option("--atol", eval_atol, "solver atol");
  cmd_eval->add_option("--rtol", eval_rtol, "solver rtol");

  double lo = -6.0, hi = 6.0;
  int resolution = 301;
  auto* cmd_density = app.add_subcommand("export-density", "CSV grid of log-density");
  cmd_density->add_option("--checkpoint", ckpt_path, "checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_density->add_option("--out", out_file, "output CSV")->required();
  cmd_density->add_option("--lo", lo, "grid lower bound");
  cmd_density->add_option("--hi", hi, "grid upper bound");
  cmd_density->add_option("--resolution", resolution, "points per axis");
  cmd_density->add_option("--atol", eval_atol, "solver atol");
  cmd_density->add_option("--rtol", eval_rtol, "solver rtol");

  int traj_grid = 10;
  double traj_bound = 2.0;
  auto* cmd_traj = app.add_subcommand("export-traj", "JSON trajectories from grid starts");
  cmd_traj->add_option("--checkpoint", ckpt_path, "checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_traj->add_option("--out", out_file, "output JSON")->required();
  cmd_traj->add_option("--grid", traj_grid, "starts per axis");
  cmd_traj->add_option("--bound", traj_bound, "grid half-width");
  cmd_traj->add_option("--atol", eval_atol, "solver atol");
  cmd_traj->add_option("--rtol", eval_rtol, "solver rtol");

  auto* cmd_theory = app.add_subcommand("theory-check", "run the theorem witnesses");
  (void)cmd_theory;

  SelftestOptions self_opt;
  auto* cmd_self = app.add_subcommand("selftest", "fast invariant battery");
  cmd_self->add_option("--corrupt-tableau", self_opt.corrupt_tableau,
                       "test hook: perturb one solver weight");
  cmd_self->add_flag("--flip-alpha-sign", self_opt.flip_alpha_sign,
                     "test hook: flip the regularizer sign");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << e.what() << "\n";
    return 1;
  }

  cfg.tpr_enabled = tpr_flag == "on";

  try {
    if (cmd_train->parsed()) {
      TrainResult res = train(cfg);
      std::printf("run complete: %zu rows, final test NLL %.6g, tail NFE %.2f\n",
                  res.record.rows.size(), res.final_test_nll,
                  res.record.mean_nfe_tail(std::min(200, cfg.iterations)));
      return 0;
    }
    if (cmd_paired->parsed()) {
      fs::create_directories(cfg.out_dir);
      save_config_json((fs::path(cfg.out_dir) / "config.resolved.json").string(), cfg);
      PairedSummary s = paired_run(cfg, !sequential);
      std::printf("dataset=%s seed=%llu nfe_baseline=%.2f nfe_tpr=%.2f reduction=%.2f%% "
                  "nll_baseline=%.4f nll_tpr=%.4f\n",
                  s.dataset.c_str(), static_cast<unsigned long long>(s.seed), s.nfe_baseline,
                  s.nfe_tpr, s.nfe_reduction_pct, s.nll_baseline, s.nll_tpr);
      return 0;
    }
    if (cmd_eval->parsed()) {
      Tape tape;
      CheckpointInfo info = load_checkpoint(tape, ckpt_path);
      const std::string name = cmd_eval->count("--dataset") || info.dataset.empty()
                                   ? eval_dataset
                                   : info.dataset;
      Tensor testset = generate(name, test_points, eval_seed).points;
      SolverConfig solver;
      solver.atol = eval_atol;
      solver.rtol = eval_rtol;
      EvalResult ev = evaluate(tape, info.model, testset, solver);
      nlohmann::json j{{"dataset", name},
                       {"seed", eval_seed},
                       {"test_nll", ev.nll},
                       {"eval_nfe", ev.mean_nfe}};
      std::cout << j.dump() << "\n";
      return 0;
    }
    if (cmd_density->parsed()) {
      Tape tape;
      CheckpointInfo info = load_checkpoint(tape, ckpt_path);
      SolverConfig solver;
      solver.atol = eval_atol;
      solver.rtol = eval_rtol;
      export_density_grid(tape, info.model, lo, hi, resolution, solver, out_file);
      return 0;
    }
    if (cmd_traj->parsed()) {
      Tape tape;
      CheckpointInfo info = load_checkpoint(tape, ckpt_path);
      SolverConfig solver;
      solver.atol = eval_atol;
      solver.rtol = eval_rtol;
      export_trajectories(tape, info.model, traj_grid, traj_bound, solver, out_file);
      return 0;
    }
    if (cmd_theory->parsed()) return run_theory_table();
    if (cmd_self->parsed()) return run_selftest_table(self_opt);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
