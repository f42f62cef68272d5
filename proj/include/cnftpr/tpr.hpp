#pragma once

#include <random>
#include <vector>

#include "cnftpr/ode.hpp"
#include "cnftpr/tape.hpp"

namespace cnftpr {

// Trajectory polynomial regularization: sample times, fit a degree-d
// polynomial to the trajectory states by least squares, and penalize the
// mean squared projection residual.

struct TprConfig {
  int num_taus = 4;      // n
  int degree = 1;        // d
  double alpha = 5.0;
  bool pin_endpoints = true;
  // n >= d + 2, otherwise the fit interpolates and the loss is identically 0.
};

struct SampleTimes {
  std::vector<double> taus;  // sorted, distinct, inside [t0, t1]
};

// Endpoints pinned to t0/t1, interior times uniform, resampled (up to 100
// tries) until all gaps exceed 1e-6*(t1-t0); falls back to equispaced.
SampleTimes sample_times(std::mt19937_64& rng, const TprConfig& cfg, double t0, double t1);

struct BasisMatrix {
  Tensor T;  // n x (d+1), monomials of time normalized to [-1, 1]
  Tensor U;  // leftmost d+1 left singular vectors of T, orthonormal columns
  double t0 = 0.0, t1 = 1.0;
};

BasisMatrix polynomial_basis(const SampleTimes& taus, int degree, double t0, double t1);

// (1/n) * ||(I - U U^T) Y||_F^2 / batch, with a constant projector. Y rows
// are the flattened batch states at each tau.
Var tpr_residual(Tape& tape, Var Y, const BasisMatrix& basis, int batch);

// Assembles Y from the solution's sampled states (y block only, the
// log-density channel is excluded) and applies the residual.
Var tpr_loss(Tape& tape, const OdeSolution& solution, const SampleTimes& taus,
             const TprConfig& cfg, int data_dim, double t0, double t1);

// Thin SVD of a tall (rows >= cols) matrix by one-sided Jacobi rotations.
// Returns U (rows x cols) with orthonormal columns and the singular values;
// sufficient for the tiny basis matrices used here.
struct ThinSvd {
  Tensor U;
  std::vector<double> sigma;
};
ThinSvd thin_svd(const Tensor& A);

}  // namespace cnftpr
