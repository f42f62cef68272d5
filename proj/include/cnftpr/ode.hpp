#pragma once

#include <array>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

#include "cnftpr/tape.hpp"

namespace cnftpr {

struct SolverConfig {
  double atol = 1e-4;
  double rtol = 1e-4;
  double t0 = 0.0;
  double t1 = 1.0;
  std::vector<double> mandatory_times;  // sorted, unique, inside [t0, t1]
  double initial_step = 0.0;            // 0 = choose automatically
  int max_steps = 10000;
  double safety = 0.9;
  double min_factor = 0.2;
  double max_factor = 10.0;
  // How states at mandatory times are produced. Dense output evaluates the
  // 4th-order interpolant of the bracketing accepted step (no extra function
  // evaluations, still recorded and differentiable). Clipping shortens steps
  // to land on each time exactly, paying roughly one extra step per interior
  // time.
  bool clip_mandatory_times = false;
};

struct SolverStats {
  long nfe = 0;
  int accepted_steps = 0;
  int rejected_steps = 0;
};

// Accepted-step mesh plus states at the requested mandatory times (keys match
// those times exactly; with clipping the times are also mesh points). States
// are tape Vars, so downstream losses differentiate through every stored step.
struct OdeSolution {
  std::vector<double> times;
  std::vector<Var> states;
  std::map<double, Var> sampled_states;
  SolverStats stats;
};

class SolverError : public std::runtime_error {
 public:
  enum class Kind { kMaxSteps, kNonFinite };
  SolverError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind(kind) {}
  Kind kind;
};

using Dynamics = std::function<Var(const Var& y, double t)>;

// h_next = h * clamp(safety * error_norm^(-1/5), min_factor, max_factor).
double propose_next_step(double error_norm, double h, const SolverConfig& cfg);

// One Dormand-Prince 5(4) attempt from (t, y) with step h and first stage k1.
// Consumes exactly 6 fresh dynamics evaluations (FSAL: k1 comes in, the last
// stage goes out for reuse). The error estimate is the difference between the
// 5th- and 4th-order results, returned as a plain tensor: accept/reject logic
// is not differentiated.
struct StepResult {
  Var y5;
  Var last_stage;      // == stages[6]
  Tensor error;
  std::array<Var, 7> stages;
};
StepResult dopri5_attempt_step(const Dynamics& f, const Var& y, const Var& k1, double t,
                               double h);

// 4th-order dense-output interpolant of an accepted step, theta in [0, 1].
// A recorded linear combination of the stages: costs no evaluations and
// stays differentiable.
Var dopri5_dense_eval(const Var& y_old, const std::array<Var, 7>& stages, double h,
                      double theta);

// Adaptive integration from t0 to t1 with mandatory mesh points hit exactly
// (steps are clipped to land on them). Throws SolverError on failure.
OdeSolution integrate(const Dynamics& f, const Var& y0, const SolverConfig& cfg);

// Fixed-step variant with adaptation disabled; used by convergence-order
// checks. The step count is ceil((t1-t0)/h).
Var integrate_fixed(const Dynamics& f, const Var& y0, double t0, double t1, double h,
                    SolverStats* stats = nullptr);

namespace dopri5 {
// Butcher tableau accessors, exposed for order/mutation tests.
extern const double kC[7];
extern const double kA[7][6];
extern const double kB5[7];
extern const double kB4[7];
extern const double kP[7][4];  // dense-output polynomial coefficients
// Test hook: additive perturbation of one 5th-order weight. Not thread safe;
// reset to 0 after use.
void corrupt_for_testing(double delta);
double tableau_corruption();
}  // namespace dopri5

}  // namespace cnftpr
