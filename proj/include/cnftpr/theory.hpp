#pragma once

#include <functional>
#include <string>
#include <vector>

namespace cnftpr {

// Numerically verified witnesses for the constructive existence results:
// the 1D constant-velocity transport between densities, and the
// divergence-free field confined to a box.

using Density1D = std::function<double(double)>;

// Monotone transport z(x) with p0(x) = p1(z(x)) z'(x), found by CDF matching
// on a fixed quadrature grid; z is evaluable anywhere in the grid range.
class Transport1D {
 public:
  // Quadrature: composite trapezoid on `quad_points` points over
  // [quad_lo, quad_hi]; inversion by bisection to 1e-10.
  Transport1D(Density1D p0, Density1D p1, double quad_lo = -10.0, double quad_hi = 10.0,
              int quad_points = 20001);

  double z_of_x(double x) const;
  // Central differences. The step balances curvature where the transport is
  // steep against the 1e-10 bisection quantization of each z evaluation.
  double dz_dx(double x, double step = 1e-6) const;
  double cdf0(double x) const;
  double cdf1(double x) const;
  double p0(double x) const { return p0_(x); }
  double p1(double x) const { return p1_(x); }

  // Constant-velocity interpolant: x at t0, z(x) at t1.
  double straight_line_flow(double x, double t, double t0, double t1) const;

 private:
  double cdf_eval(const std::vector<double>& cum, const std::vector<double>& dens,
                  double x) const;
  double invert_cdf1(double target) const;

  Density1D p0_, p1_;
  double lo_, hi_;
  int n_;
  double h_;
  std::vector<double> dens0_, dens1_;  // density values at the nodes
  std::vector<double> cum0_, cum1_;    // cumulative trapezoid masses
};

struct BoxField {
  std::vector<double> L;  // box half-widths (one per dimension)
  std::vector<double> c;  // coefficients; divergence-free iff they sum to 0

  int dim() const { return static_cast<int>(L.size()); }
  bool inside(const std::vector<double>& z) const;
  std::vector<double> u(const std::vector<double>& z) const;
  // Analytic divergence: (sum c_i) * prod sin(pi z_i / L_i) inside, 0 outside.
  double divergence_analytic(const std::vector<double>& z) const;
};

// Central-difference divergence, step 1e-5.
double box_field_divergence(const BoxField& field, const std::vector<double>& z,
                            double step = 1e-5);

using DensityND = std::function<double(const std::vector<double>&)>;

struct VariationReport {
  double max_v = 0.0;        // max_i sup |v'_i| over the grid, v' = u / p1
  double max_jacobian = 0.0; // max finite-difference entry of dv'/dz
  bool finite = false;
};

// Scans v' = u/p1 over a uniform grid inside the box (with a small margin so
// the finite differences stay interior).
VariationReport verify_variation_boundedness(const BoxField& field, const DensityND& p1,
                                             int grid_per_dim, double margin = 1e-3);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Full witness battery, as printed by the theory-check command.
std::vector<CheckResult> run_theory_checks(uint64_t seed = 7);

}  // namespace cnftpr
