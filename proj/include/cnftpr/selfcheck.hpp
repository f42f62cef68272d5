#pragma once

#include <vector>

#include "cnftpr/tensor.hpp"
#include "cnftpr/theory.hpp"

namespace cnftpr {

struct SelftestOptions {
  // Mutation hooks: used by tests to confirm the checks can fail.
  double corrupt_tableau = 0.0;
  bool flip_alpha_sign = false;
};

// Fast invariant battery: autodiff gradient checks, solver order, TPR
// oracle equivalence, and the theory witnesses. Finishes well under two
// minutes.
std::vector<CheckResult> run_selftest(const SelftestOptions& opt = {});

// Independent least-squares residual via the normal equations
// (T^T T) C = T^T Y, Gaussian elimination; returns |Y - T C|_F^2 / (n*batch).
// Kept free of the SVD path on purpose so the two routes cross-check.
double normal_equations_residual(const Tensor& T, const Tensor& Y, int batch);

}  // namespace cnftpr
