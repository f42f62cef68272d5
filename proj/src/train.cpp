#include "cnftpr/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <thread>

#include "cnftpr/rng.hpp"

namespace cnftpr {

namespace fs = std::filesystem;

TrainConfig TrainConfig::defaults() {
  TrainConfig cfg;
  cfg.solver_train.atol = 1e-4;
  cfg.solver_train.rtol = 1e-4;
  cfg.solver_eval.atol = 1e-5;
  cfg.solver_eval.rtol = 1e-5;
  return cfg;
}

double RunRecord::mean_nfe_tail(int window) const {
  if (rows.empty()) return 0.0;
  const int n = static_cast<int>(rows.size());
  const int take = std::min(window, n);
  double acc = 0.0;
  for (int i = n - take; i < n; ++i) acc += static_cast<double>(rows[i].nfe);
  return acc / take;
}

void write_run_csv(const std::string& path, const RunRecord& record) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("write_run_csv: cannot open " + path);
  std::fprintf(f, "iter,loss,nll,tpr,nfe,accepted,rejected,wall_ms\n");
  for (const IterRow& r : record.rows)
    std::fprintf(f, "%d,%.12g,%.12g,%.12g,%ld,%d,%d,%.3f\n", r.iter, r.loss, r.nll, r.tpr,
                 r.nfe, r.accepted, r.rejected, r.wall_ms);
  std::fclose(f);
}

void write_eval_csv(const std::string& path, const RunRecord& record) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("write_eval_csv: cannot open " + path);
  std::fprintf(f, "iter,test_nll,eval_nfe\n");
  for (const EvalRow& r : record.evals)
    std::fprintf(f, "%d,%.12g,%.12g\n", r.iter, r.test_nll, r.eval_nfe);
  std::fclose(f);
}

LossInfo loss_step(Tape& tape, const FlowModel& model, const Tensor& batch,
                   const TrainConfig& cfg, std::mt19937_64& rng_tau,
                   std::mt19937_64& rng_eps) {
  SolverConfig solver = cfg.solver_train;
  SampleTimes taus;
  if (cfg.tpr_enabled) {
    taus = sample_times(rng_tau, cfg.tpr, solver.t0, solver.t1);
    solver.mandatory_times = taus.taus;
  }

  TraceMode mode = TraceMode::exact();
  std::vector<Tensor> eps;
  if (cfg.trace == "hutchinson") {
    mode = TraceMode::hutchinson(cfg.hutchinson_samples);
    for (int s = 0; s < cfg.hutchinson_samples; ++s)
      eps.push_back(draw_rademacher(batch.rows, model.data_dim, rng_eps));
  }

  Likelihood lk = log_likelihood(tape, model.velocity_fn(), model.data_dim, batch, solver,
                                 mode, std::move(eps));
  LossInfo info;
  info.stats = lk.solution.stats;
  Var l0 = tape.neg(tape.mean(lk.logq));
  info.l0 = l0.item();
  if (cfg.tpr_enabled) {
    Var lp = tpr_loss(tape, lk.solution, taus, cfg.tpr, model.data_dim, solver.t0, solver.t1);
    info.lp = lp.item();
    info.total = tape.add(l0, tape.affine(lp, cfg.tpr.alpha, 0.0));
  } else {
    info.lp = 0.0;
    info.total = l0;
  }
  return info;
}

EvalResult evaluate(Tape& tape, const FlowModel& model, const Tensor& testset,
                    const SolverConfig& solver_eval) {
  // Small chunks keep the recorded solve graph (which eval never
  // backpropagates) within a modest memory envelope.
  const int chunk = 128;
  const int n = testset.rows;
  double nll_acc = 0.0;
  double nfe_acc = 0.0;
  int solves = 0;
  const size_t mark = tape.mark();
  try {
    for (int start = 0; start < n; start += chunk) {
      const int take = std::min(chunk, n - start);
      Tensor part(take, testset.cols);
      for (int i = 0; i < take; ++i)
        for (int j = 0; j < testset.cols; ++j) part.at(i, j) = testset.at(start + i, j);
      Likelihood lk = log_likelihood(tape, model.velocity_fn(), model.data_dim, part,
                                     solver_eval, TraceMode::exact());
      for (int i = 0; i < take; ++i) nll_acc -= lk.logq.value().at(i, 0);
      nfe_acc += static_cast<double>(lk.solution.stats.nfe);
      ++solves;
      tape.rewind(mark);
    }
  } catch (const SolverError& e) {
    tape.rewind(mark);
    std::cerr << "evaluate: solver failure, reporting NaN (" << e.what() << ")\n";
    return EvalResult{std::nan(""), std::nan("")};
  }
  return EvalResult{nll_acc / n, nfe_acc / solves};
}

namespace {

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["dataset"] = cfg.dataset;
  j["batch"] = cfg.batch_size;
  j["iters"] = cfg.iterations;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["tpr"] = cfg.tpr_enabled ? "on" : "off";
  j["alpha"] = cfg.tpr.alpha;
  j["degree"] = cfg.tpr.degree;
  j["num_taus"] = cfg.tpr.num_taus;
  j["atol"] = cfg.solver_train.atol;
  j["rtol"] = cfg.solver_train.rtol;
  j["eval_atol"] = cfg.solver_eval.atol;
  j["eval_rtol"] = cfg.solver_eval.rtol;
  j["t0"] = cfg.solver_train.t0;
  j["t1"] = cfg.solver_train.t1;
  j["trace"] = cfg.trace;
  j["hutchinson_samples"] = cfg.hutchinson_samples;
  j["hidden"] = cfg.hidden;
  j["seed"] = cfg.seed;
  j["eval_every"] = cfg.eval_every;
  j["test_points"] = cfg.test_points;
  j["out"] = cfg.out_dir;
  return j;
}

}  // namespace

void save_config_json(const std::string& path, const TrainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_config_json: cannot open " + path);
  out << config_to_json(cfg).dump(2) << "\n";
}

TrainConfig load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config_json: cannot open " + path);
  nlohmann::json j;
  in >> j;
  TrainConfig cfg = TrainConfig::defaults();
  cfg.dataset = j.value("dataset", cfg.dataset);
  cfg.batch_size = j.value("batch", cfg.batch_size);
  cfg.iterations = j.value("iters", cfg.iterations);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  if (j.contains("tpr")) cfg.tpr_enabled = j["tpr"] == "on";
  cfg.tpr.alpha = j.value("alpha", cfg.tpr.alpha);
  cfg.tpr.degree = j.value("degree", cfg.tpr.degree);
  cfg.tpr.num_taus = j.value("num_taus", cfg.tpr.num_taus);
  cfg.solver_train.atol = j.value("atol", cfg.solver_train.atol);
  cfg.solver_train.rtol = j.value("rtol", cfg.solver_train.rtol);
  cfg.solver_eval.atol = j.value("eval_atol", cfg.solver_eval.atol);
  cfg.solver_eval.rtol = j.value("eval_rtol", cfg.solver_eval.rtol);
  cfg.solver_train.t0 = cfg.solver_eval.t0 = j.value("t0", cfg.solver_train.t0);
  cfg.solver_train.t1 = cfg.solver_eval.t1 = j.value("t1", cfg.solver_train.t1);
  cfg.trace = j.value("trace", cfg.trace);
  cfg.hutchinson_samples = j.value("hutchinson_samples", cfg.hutchinson_samples);
  if (j.contains("hidden")) cfg.hidden = j["hidden"].get<std::vector<int>>();
  cfg.seed = j.value("seed", cfg.seed);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  cfg.test_points = j.value("test_points", cfg.test_points);
  cfg.out_dir = j.value("out", cfg.out_dir);
  return cfg;
}

TrainResult train(const TrainConfig& cfg) {
  if (cfg.iterations <= 0) throw std::invalid_argument("train: iterations must be positive");
  if (!is_known_dataset(cfg.dataset))
    throw std::invalid_argument("train: unknown dataset '" + cfg.dataset + "'");
  if (cfg.tpr_enabled) {
    // degree at most solver order - 1, and enough times for a non-trivial fit
    if (cfg.tpr.degree < 0 || cfg.tpr.degree > 4)
      throw std::invalid_argument("train: TPR degree must be in [0, 4]");
    if (cfg.tpr.num_taus < cfg.tpr.degree + 2)
      throw std::invalid_argument(
          "train: need at least degree + 2 sample times, otherwise the fit interpolates");
  }
  fs::create_directories(cfg.out_dir);
  save_config_json((fs::path(cfg.out_dir) / "config.resolved.json").string(), cfg);

  Tape tape;
  std::mt19937_64 rng_init = make_engine(cfg.seed, 0x1217);
  std::mt19937_64 rng_tau = make_engine(cfg.seed, 0x7A05);
  std::mt19937_64 rng_eps = make_engine(cfg.seed, 0xE505);
  DataStream stream(cfg.dataset, cfg.seed);

  FlowModel model = FlowModel::create(tape, 2, cfg.hidden, rng_init);
  Adam adam(model.params(), AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  const size_t mark = tape.mark();

  const Tensor testset = generate(cfg.dataset, cfg.test_points, cfg.seed).points;

  TrainResult result;
  int consecutive_failures = 0;
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    tape.rewind(mark);
    const Tensor batch = stream.next(cfg.batch_size);
    const auto t_start = std::chrono::steady_clock::now();
    try {
      LossInfo info = loss_step(tape, model, batch, cfg, rng_tau, rng_eps);
      GradMap grads = tape.backward(info.total);
      if (!adam.step(tape, grads))
        std::cerr << "train: non-finite gradient at iter " << iter << ", update skipped\n";
      const double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
              .count();
      result.record.rows.push_back(IterRow{iter, info.total.item(), info.l0, info.lp,
                                           info.stats.nfe, info.stats.accepted_steps,
                                           info.stats.rejected_steps, wall_ms});
      consecutive_failures = 0;
    } catch (const SolverError& e) {
      ++consecutive_failures;
      std::cerr << "train: solver failure at iter " << iter << " (" << e.what() << ")\n";
      if (consecutive_failures >= 3)
        throw std::runtime_error("train: three consecutive solver failures, aborting run");
      continue;
    }

    if (cfg.eval_every > 0 && iter % cfg.eval_every == 0 && iter < cfg.iterations) {
      tape.rewind(mark);
      EvalResult ev = evaluate(tape, model, testset, cfg.solver_eval);
      result.record.evals.push_back(EvalRow{iter, ev.nll, ev.mean_nfe});
    }
  }

  tape.rewind(mark);
  EvalResult final_eval = evaluate(tape, model, testset, cfg.solver_eval);
  result.record.evals.push_back(EvalRow{cfg.iterations, final_eval.nll, final_eval.mean_nfe});
  result.final_test_nll = final_eval.nll;

  result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.json").string();
  save_checkpoint(result.checkpoint_path, model, cfg.dataset);
  write_run_csv((fs::path(cfg.out_dir) / "run.csv").string(), result.record);
  write_eval_csv((fs::path(cfg.out_dir) / "eval.csv").string(), result.record);
  return result;
}

void export_density_grid(Tape& tape, const FlowModel& model, double lo, double hi,
                         int resolution, const SolverConfig& solver,
                         const std::string& path) {
  if (resolution < 1) throw std::invalid_argument("export_density_grid: resolution >= 1");
  std::vector<double> coords;
  if (resolution == 1) {
    coords.push_back(0.5 * (lo + hi));
  } else {
    for (int i = 0; i < resolution; ++i)
      coords.push_back(lo + (hi - lo) * i / (resolution - 1));
  }

  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("export_density_grid: cannot open " + path);
  std::fprintf(f, "x0,x1,logq\n");

  const int total = resolution * resolution;
  const int chunk = 256;
  const size_t mark = tape.mark();
  for (int start = 0; start < total; start += chunk) {
    const int take = std::min(chunk, total - start);
    Tensor pts(take, 2);
    for (int i = 0; i < take; ++i) {
      const int idx = start + i;
      pts.at(i, 0) = coords[idx / resolution];
      pts.at(i, 1) = coords[idx % resolution];
    }
    std::vector<double> logq(take, std::nan(""));
    try {
      Likelihood lk =
          log_likelihood(tape, model.velocity_fn(), 2, pts, solver, TraceMode::exact());
      for (int i = 0; i < take; ++i) logq[i] = lk.logq.value().at(i, 0);
    } catch (const SolverError& e) {
      std::cerr << "export_density_grid: solver failure, NaN rows (" << e.what() << ")\n";
    }
    for (int i = 0; i < take; ++i)
      std::fprintf(f, "%.12g,%.12g,%.12g\n", pts.at(i, 0), pts.at(i, 1), logq[i]);
    tape.rewind(mark);
  }
  std::fclose(f);
}

namespace {

Tensor grid_starts(int grid_n, double bound) {
  Tensor starts(grid_n * grid_n, 2);
  for (int i = 0; i < grid_n; ++i)
    for (int j = 0; j < grid_n; ++j) {
      const double x = grid_n == 1 ? 0.0 : -bound + 2.0 * bound * i / (grid_n - 1);
      const double y = grid_n == 1 ? 0.0 : -bound + 2.0 * bound * j / (grid_n - 1);
      starts.at(i * grid_n + j, 0) = x;
      starts.at(i * grid_n + j, 1) = y;
    }
  return starts;
}

}  // namespace

void export_trajectories(Tape& tape, const FlowModel& model, int grid_n, double bound,
                         const SolverConfig& solver, const std::string& path) {
  const Tensor starts = grid_starts(grid_n, bound);
  const size_t mark = tape.mark();
  nlohmann::json j;
  j["truncated"] = false;
  SolverConfig cfg = solver;
  OdeSolution sol;
  bool solved = false;
  try {
    sol = flow_forward(tape, model.velocity_fn(), starts, cfg);
    solved = true;
  } catch (const SolverError& e) {
    // Flag and retry on the sub-interval the solver could handle.
    std::cerr << "export_trajectories: solver failure (" << e.what() << "), truncating\n";
    j["truncated"] = true;
    j["error"] = e.what();
    cfg.t1 = cfg.t0 + 0.5 * (cfg.t1 - cfg.t0);
    try {
      sol = flow_forward(tape, model.velocity_fn(), starts, cfg);
      solved = true;
    } catch (const SolverError&) {
    }
  }

  nlohmann::json trajs = nlohmann::json::array();
  if (solved) {
    const int n = starts.rows;
    for (int e = 0; e < n; ++e) {
      nlohmann::json traj;
      traj["start"] = {starts.at(e, 0), starts.at(e, 1)};
      nlohmann::json times = nlohmann::json::array();
      nlohmann::json points = nlohmann::json::array();
      for (size_t k = 0; k < sol.times.size(); ++k) {
        times.push_back(sol.times[k]);
        const Tensor& st = sol.states[k].value();
        points.push_back({st.at(e, 0), st.at(e, 1)});
      }
      traj["t"] = std::move(times);
      traj["y"] = std::move(points);
      trajs.push_back(std::move(traj));
    }
  }
  j["trajectories"] = std::move(trajs);
  tape.rewind(mark);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_trajectories: cannot open " + path);
  out << j.dump() << "\n";
}

double mean_straightness(Tape& tape, const FlowModel& model, int grid_n, double bound,
                         const SolverConfig& solver) {
  const Tensor starts = grid_starts(grid_n, bound);
  const size_t mark = tape.mark();
  OdeSolution sol = flow_forward(tape, model.velocity_fn(), starts, solver);
  const int n = starts.rows;
  double acc = 0.0;
  for (int e = 0; e < n; ++e) {
    double path = 0.0;
    for (size_t k = 0; k + 1 < sol.states.size(); ++k) {
      const Tensor& a = sol.states[k].value();
      const Tensor& b = sol.states[k + 1].value();
      path += std::hypot(b.at(e, 0) - a.at(e, 0), b.at(e, 1) - a.at(e, 1));
    }
    const Tensor& first = sol.states.front().value();
    const Tensor& last = sol.states.back().value();
    const double chord = std::hypot(last.at(e, 0) - first.at(e, 0),
                                    last.at(e, 1) - first.at(e, 1));
    acc += path > 1e-12 ? chord / path : 1.0;
  }
  tape.rewind(mark);
  return acc / n;
}

PairedSummary paired_run(const TrainConfig& base, bool concurrent) {
  TrainConfig baseline = base;
  baseline.tpr_enabled = false;
  baseline.out_dir = (fs::path(base.out_dir) / "baseline").string();
  TrainConfig tpr_arm = base;
  tpr_arm.tpr_enabled = true;
  tpr_arm.out_dir = (fs::path(base.out_dir) / "tpr").string();

  TrainResult res_base, res_tpr;
  if (concurrent) {
    std::exception_ptr err_base, err_tpr;
    std::thread tb([&] {
      try {
        res_base = train(baseline);
      } catch (...) {
        err_base = std::current_exception();
      }
    });
    std::thread tt([&] {
      try {
        res_tpr = train(tpr_arm);
      } catch (...) {
        err_tpr = std::current_exception();
      }
    });
    tb.join();
    tt.join();
    if (err_base) std::rethrow_exception(err_base);
    if (err_tpr) std::rethrow_exception(err_tpr);
  } else {
    res_base = train(baseline);
    res_tpr = train(tpr_arm);
  }

  const int window = std::min(200, base.iterations);
  PairedSummary summary;
  summary.dataset = base.dataset;
  summary.seed = base.seed;
  summary.nfe_baseline = res_base.record.mean_nfe_tail(window);
  summary.nfe_tpr = res_tpr.record.mean_nfe_tail(window);
  summary.nfe_reduction_pct =
      100.0 * (summary.nfe_baseline - summary.nfe_tpr) / summary.nfe_baseline;
  summary.nll_baseline = res_base.final_test_nll;
  summary.nll_tpr = res_tpr.final_test_nll;

  nlohmann::json j;
  j["dataset"] = summary.dataset;
  j["seed"] = summary.seed;
  j["nfe_baseline"] = summary.nfe_baseline;
  j["nfe_tpr"] = summary.nfe_tpr;
  j["nfe_reduction_pct"] = summary.nfe_reduction_pct;
  j["nll_baseline"] = summary.nll_baseline;
  j["nll_tpr"] = summary.nll_tpr;
  fs::create_directories(base.out_dir);
  std::ofstream out(fs::path(base.out_dir) / "comparison.json");
  out << j.dump(2) << "\n";
  return summary;
}

}  // namespace cnftpr
