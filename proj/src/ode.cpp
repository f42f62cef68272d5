#include "cnftpr/ode.hpp"

#include <algorithm>
#include <cmath>

namespace cnftpr {

namespace dopri5 {

const double kC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};

const double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
};

const double kB5[7] = {35.0 / 384,      0.0,        500.0 / 1113, 125.0 / 192,
                       -2187.0 / 6784,  11.0 / 84,  0.0};

const double kB4[7] = {5179.0 / 57600,     0.0,          7571.0 / 16695, 393.0 / 640,
                       -92097.0 / 339200,  187.0 / 2100, 1.0 / 40};

// Dense-output polynomials: b_i(theta) = sum_j kP[i][j] theta^(j+1); at
// theta = 1 they reduce to the 5th-order weights.
const double kP[7][4] = {
    {1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0,
     -12715105075.0 / 11282082432.0},
    {0.0, 0.0, 0.0, 0.0},
    {0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0,
     87487479700.0 / 32700410799.0},
    {0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0,
     -10690763975.0 / 1880347072.0},
    {0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0,
     701980252875.0 / 199316789632.0},
    {0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0,
     -1453857185.0 / 822651844.0},
    {0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0}};

namespace {
double g_tableau_corruption = 0.0;
}

// Test hook: perturbs one 5th-order weight so order checks can verify they
// would catch a broken tableau. Not thread safe; reset to 0 after use.
void corrupt_for_testing(double delta) { g_tableau_corruption = delta; }
double tableau_corruption() { return g_tableau_corruption; }

}  // namespace dopri5

double propose_next_step(double error_norm, double h, const SolverConfig& cfg) {
  double factor;
  if (error_norm <= 0.0) {
    factor = cfg.max_factor;
  } else {
    factor = cfg.safety * std::pow(error_norm, -0.2);
    factor = std::clamp(factor, cfg.min_factor, cfg.max_factor);
  }
  return h * factor;
}

StepResult dopri5_attempt_step(const Dynamics& f, const Var& y, const Var& k1, double t,
                               double h) {
  if (h <= 0.0) throw std::invalid_argument("dopri5_attempt_step: h must be positive");
  Tape& tape = *y.tape;

  double b5[7];
  std::copy(std::begin(dopri5::kB5), std::end(dopri5::kB5), b5);
  b5[2] += dopri5::tableau_corruption();

  Var k[7];
  k[0] = k1;
  for (int i = 1; i < 6; ++i) {
    std::vector<Var> xs{y};
    std::vector<double> cs{1.0};
    for (int j = 0; j < i; ++j) {
      if (dopri5::kA[i][j] == 0.0) continue;
      xs.push_back(k[j]);
      cs.push_back(h * dopri5::kA[i][j]);
    }
    Var yi = tape.lincomb(xs, cs);
    if (!yi.value().all_finite())
      throw SolverError(SolverError::Kind::kNonFinite,
                        "dopri5: non-finite intermediate stage at t=" + std::to_string(t));
    k[i] = f(yi, t + dopri5::kC[i] * h);
  }

  // The last stage row equals the 5th-order weights, so its input state is
  // the 5th-order solution itself and its evaluation seeds the next step
  // (FSAL): 6 fresh evaluations in total.
  std::vector<Var> xs{y};
  std::vector<double> cs{1.0};
  for (int j = 0; j < 6; ++j) {
    if (b5[j] == 0.0) continue;
    xs.push_back(k[j]);
    cs.push_back(h * b5[j]);
  }
  Var y5 = tape.lincomb(xs, cs);
  if (!y5.value().all_finite())
    throw SolverError(SolverError::Kind::kNonFinite,
                      "dopri5: non-finite state at t=" + std::to_string(t + h));
  k[6] = f(y5, t + h);

  Tensor err(y.rows(), y.cols());
  for (int j = 0; j < 7; ++j) {
    const double e = b5[j] - dopri5::kB4[j];
    if (e == 0.0) continue;
    const Tensor& kv = k[j].value();
    for (int idx = 0; idx < err.size(); ++idx) err.d[idx] += h * e * kv.d[idx];
  }
  StepResult result;
  result.y5 = y5;
  result.last_stage = k[6];
  result.error = std::move(err);
  for (int j = 0; j < 7; ++j) result.stages[j] = k[j];
  return result;
}

namespace {

// RMS of err / (atol + rtol * max(|y_old|, |y_new|)).
double error_norm(const Tensor& err, const Tensor& y_old, const Tensor& y_new,
                  const SolverConfig& cfg) {
  double acc = 0.0;
  for (int i = 0; i < err.size(); ++i) {
    const double sc =
        cfg.atol + cfg.rtol * std::max(std::fabs(y_old.d[i]), std::fabs(y_new.d[i]));
    const double q = err.d[i] / sc;
    acc += q * q;
  }
  return std::sqrt(acc / err.size());
}

double initial_step_heuristic(const Tensor& y0, const Tensor& f0, const SolverConfig& cfg) {
  double d0 = 0.0, d1 = 0.0;
  for (int i = 0; i < y0.size(); ++i) {
    const double sc = cfg.atol + cfg.rtol * std::fabs(y0.d[i]);
    const double a = y0.d[i] / sc;
    const double b = f0.d[i] / sc;
    d0 += a * a;
    d1 += b * b;
  }
  d0 = std::sqrt(d0 / y0.size());
  d1 = std::sqrt(d1 / y0.size());
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  return std::min(h0, cfg.t1 - cfg.t0);
}

void validate(const Var& y0, const SolverConfig& cfg) {
  if (cfg.atol <= 0.0 || cfg.rtol <= 0.0)
    throw std::invalid_argument("integrate: atol and rtol must be positive");
  if (!(cfg.t0 < cfg.t1)) throw std::invalid_argument("integrate: requires t0 < t1");
  if (!y0.value().all_finite())
    throw std::invalid_argument("integrate: initial state is not finite");
  double prev = cfg.t0;
  bool first = true;
  for (double m : cfg.mandatory_times) {
    if (m < cfg.t0 || m > cfg.t1)
      throw std::invalid_argument("integrate: mandatory time outside [t0, t1]");
    if (!first && m <= prev)
      throw std::invalid_argument("integrate: mandatory times must be sorted and unique");
    if (first && m < prev)
      throw std::invalid_argument("integrate: mandatory times must be sorted and unique");
    prev = m;
    first = false;
  }
}

}  // namespace

Var dopri5_dense_eval(const Var& y_old, const std::array<Var, 7>& stages, double h,
                      double theta) {
  Tape& tape = *y_old.tape;
  std::vector<Var> xs{y_old};
  std::vector<double> cs{1.0};
  for (int i = 0; i < 7; ++i) {
    double b = 0.0;
    for (int j = 3; j >= 0; --j) b = b * theta + dopri5::kP[i][j];
    b *= theta;
    if (b == 0.0) continue;
    xs.push_back(stages[i]);
    cs.push_back(h * b);
  }
  return tape.lincomb(xs, cs);
}

OdeSolution integrate(const Dynamics& f, const Var& y0, const SolverConfig& cfg) {
  validate(y0, cfg);
  OdeSolution sol;

  const Dynamics counted = [&](const Var& y, double t) {
    ++sol.stats.nfe;
    return f(y, t);
  };

  // Stop points the mesh must land on: t1 always, mandatory times only in
  // clipping mode (dense output reads them off the bracketing step instead).
  std::vector<double> stops;
  size_t sample_idx = 0;
  if (cfg.mandatory_times.size() > sample_idx && cfg.mandatory_times[0] == cfg.t0) {
    sol.sampled_states.emplace(cfg.t0, y0);
    ++sample_idx;
  }
  if (cfg.clip_mandatory_times)
    for (double m : cfg.mandatory_times)
      if (m != cfg.t0) stops.push_back(m);
  if (stops.empty() || stops.back() != cfg.t1) stops.push_back(cfg.t1);

  double t = cfg.t0;
  Var y = y0;
  Var k1 = counted(y, t);
  double h = cfg.initial_step > 0.0 ? cfg.initial_step
                                    : initial_step_heuristic(y0.value(), k1.value(), cfg);

  sol.times.push_back(t);
  sol.states.push_back(y);

  size_t stop_idx = 0;
  int attempts = 0;
  while (t < cfg.t1) {
    if (attempts >= cfg.max_steps)
      throw SolverError(SolverError::Kind::kMaxSteps,
                        "integrate: exceeded max_steps=" + std::to_string(cfg.max_steps) +
                            " at t=" + std::to_string(t));
    const double t_stop = stops[stop_idx];
    const double gap = t_stop - t;
    const bool clipped = h >= gap;
    const double h_att = clipped ? gap : h;

    ++attempts;
    StepResult step = dopri5_attempt_step(counted, y, k1, t, h_att);
    const double norm = error_norm(step.error, y.value(), step.y5.value(), cfg);

    if (norm <= 1.0) {
      const double t_new = clipped ? t_stop : t + h_att;
      // States at mandatory times inside (t, t_new]: the interpolant of this
      // step, or the step endpoint itself when it lands exactly.
      while (sample_idx < cfg.mandatory_times.size() &&
             cfg.mandatory_times[sample_idx] <= t_new) {
        const double tau = cfg.mandatory_times[sample_idx];
        Var state = tau == t_new
                        ? step.y5
                        : dopri5_dense_eval(y, step.stages, h_att, (tau - t) / h_att);
        sol.sampled_states.emplace(tau, state);
        ++sample_idx;
      }
      t = t_new;
      y = step.y5;
      k1 = step.last_stage;
      ++sol.stats.accepted_steps;
      sol.times.push_back(t);
      sol.states.push_back(y);
      if (clipped) ++stop_idx;
    } else {
      ++sol.stats.rejected_steps;
    }
    h = propose_next_step(norm, h_att, cfg);
    if (h < 1e-14 * (cfg.t1 - cfg.t0))
      throw SolverError(SolverError::Kind::kMaxSteps,
                        "integrate: step size underflow at t=" + std::to_string(t));
  }
  return sol;
}

Var integrate_fixed(const Dynamics& f, const Var& y0, double t0, double t1, double h,
                    SolverStats* stats) {
  if (h <= 0.0 || !(t0 < t1)) throw std::invalid_argument("integrate_fixed: bad interval");
  SolverStats local;
  const Dynamics counted = [&](const Var& y, double t) {
    ++local.nfe;
    return f(y, t);
  };
  double t = t0;
  Var y = y0;
  Var k1 = counted(y, t);
  while (t < t1) {
    const double h_att = std::min(h, t1 - t);
    StepResult step = dopri5_attempt_step(counted, y, k1, t, h_att);
    y = step.y5;
    k1 = step.last_stage;
    ++local.accepted_steps;
    t = (h_att == t1 - t) ? t1 : t + h_att;
  }
  if (stats) *stats = local;
  return y;
}

}  // namespace cnftpr
