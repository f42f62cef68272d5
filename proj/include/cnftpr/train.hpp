#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cnftpr/data.hpp"
#include "cnftpr/flow.hpp"
#include "cnftpr/optim.hpp"
#include "cnftpr/tpr.hpp"

namespace cnftpr {

struct TrainConfig {
  std::string dataset = "rings";
  int batch_size = 256;
  int iterations = 2000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool tpr_enabled = true;
  TprConfig tpr;             // alpha, n, d
  SolverConfig solver_train;  // defaults to atol=rtol=1e-4 over [0, 1]
  SolverConfig solver_eval;   // defaults to atol=rtol=1e-5 over [0, 1]
  std::string trace = "exact";  // "exact" or "hutchinson"
  int hutchinson_samples = 1;
  std::vector<int> hidden = {64, 64, 64};
  uint64_t seed = 0;
  int eval_every = 0;  // 0: evaluate only after the last iteration
  int test_points = 10000;
  std::string out_dir = "runs/out";

  static TrainConfig defaults();
};

struct IterRow {
  int iter;
  double loss, nll, tpr;
  long nfe;
  int accepted, rejected;
  double wall_ms;
};

struct EvalRow {
  int iter;
  double test_nll;
  double eval_nfe;
};

struct RunRecord {
  std::vector<IterRow> rows;
  std::vector<EvalRow> evals;

  // Mean of the nfe column over the final `window` rows.
  double mean_nfe_tail(int window) const;
};

void write_run_csv(const std::string& path, const RunRecord& record);
void write_eval_csv(const std::string& path, const RunRecord& record);

struct LossInfo {
  Var total;
  double l0 = 0.0;
  double lp = 0.0;
  SolverStats stats;
};

// One forward solve serving both loss terms: the sampled taus are injected
// as the solver's mandatory times, L0 comes from the final state and L_p
// from the sampled states. L = L0 + alpha * L_p.
LossInfo loss_step(Tape& tape, const FlowModel& model, const Tensor& batch,
                   const TrainConfig& cfg, std::mt19937_64& rng_tau,
                   std::mt19937_64& rng_eps);

struct EvalResult {
  double nll = 0.0;
  double mean_nfe = 0.0;
};

// Mean NLL (nats/point) at eval tolerances with the exact trace; no
// parameter updates, chunked solves.
EvalResult evaluate(Tape& tape, const FlowModel& model, const Tensor& testset,
                    const SolverConfig& solver_eval);

struct TrainResult {
  RunRecord record;
  std::string checkpoint_path;
  double final_test_nll = 0.0;
};

TrainResult train(const TrainConfig& cfg);

// CSV grid of (x0, x1, logq) for external plotting.
void export_density_grid(Tape& tape, const FlowModel& model, double lo, double hi,
                         int resolution, const SolverConfig& solver,
                         const std::string& path);

// JSON polylines of the accepted-step mesh from a square grid of starts.
void export_trajectories(Tape& tape, const FlowModel& model, int grid_n, double bound,
                         const SolverConfig& solver, const std::string& path);

// Mean chord/path-length ratio over a grid of start points (1 = straight).
double mean_straightness(Tape& tape, const FlowModel& model, int grid_n, double bound,
                         const SolverConfig& solver);

struct PairedSummary {
  std::string dataset;
  uint64_t seed = 0;
  double nfe_baseline = 0.0;
  double nfe_tpr = 0.0;
  double nfe_reduction_pct = 0.0;
  double nll_baseline = 0.0;
  double nll_tpr = 0.0;
};

// Runs the baseline (alpha = 0, no taus) and TPR arms with the same seed in
// separate subdirectories and writes comparison.json.
PairedSummary paired_run(const TrainConfig& base, bool concurrent = true);

// Config file I/O: JSON mirroring the CLI flags.
void save_config_json(const std::string& path, const TrainConfig& cfg);
TrainConfig load_config_json(const std::string& path);

}  // namespace cnftpr
