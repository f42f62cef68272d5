#pragma once

#include <random>
#include <string>
#include <vector>

#include "cnftpr/ode.hpp"
#include "cnftpr/tape.hpp"

namespace cnftpr {

// Any velocity field v(y, t) built from recorded tape ops. y is batch x D.
using VelocityFn = std::function<Var(const Var& y, double t)>;

// Time-conditioned linear layer: out = (y W + b) * sigmoid(gw*t + gb) + tw*t.
struct CsqLayer {
  Var W, b, gate_w, gate_b, bias_w;
  int in = 0, out = 0;
};

// The CNF velocity network: concatsquash layers with tanh between them and a
// linear (gated) output layer.
struct FlowModel {
  int data_dim = 0;
  std::vector<int> hidden;
  std::vector<CsqLayer> layers;

  static FlowModel create(Tape& tape, int data_dim, const std::vector<int>& hidden,
                          std::mt19937_64& rng);

  Var velocity(const Var& y, double t) const;
  VelocityFn velocity_fn() const;
  std::vector<Var> params() const;
  int num_params() const;
  // Zeroes the output layer so the field is identically zero.
  void zero_output_layer(Tape& tape) const;
};

// Tr(dv/dy) per batch row via D recorded vector-Jacobian products with basis
// cotangents. Returns batch x 1; differentiable.
Var exact_trace(Tape& tape, const VelocityFn& v, const Var& y, double t);

// Hutchinson estimate eps^T (dv/dy) eps per batch row; eps entries are +-1.
// Multiple probes are averaged. Returns batch x 1; differentiable.
Var hutchinson_trace(Tape& tape, const VelocityFn& v, const Var& y, double t,
                     const std::vector<Tensor>& eps);

struct TraceMode {
  enum class Kind { kExact, kHutchinson };
  Kind kind = Kind::kExact;
  int num_samples = 1;  // Hutchinson probes per solve

  static TraceMode exact() { return TraceMode{Kind::kExact, 1}; }
  static TraceMode hutchinson(int n = 1) { return TraceMode{Kind::kHutchinson, n}; }
};

Tensor draw_rademacher(int rows, int cols, std::mt19937_64& rng);

// Augmented dynamics for the state [y | delta_logp]: returns [v | -trace].
// Each call is one NFE no matter how the trace is computed. For Hutchinson
// mode `eps` holds the probes, drawn once per solve.
Dynamics make_augmented_dynamics(Tape& tape, const VelocityFn& v, int data_dim,
                                 const TraceMode& mode, std::vector<Tensor> eps = {});

struct Likelihood {
  Var logq;  // batch x 1
  OdeSolution solution;
};

// log q(x) by integrating data forward to the standard-normal base:
// log q(x) = log N(y(t1); 0, I) - delta_logp(t1).
Likelihood log_likelihood(Tape& tape, const VelocityFn& v, int data_dim, const Tensor& x,
                          const SolverConfig& cfg, const TraceMode& mode,
                          std::vector<Tensor> eps = {});

// Draws `num` model samples by integrating base noise backwards in time.
Tensor sample(Tape& tape, const VelocityFn& v, int data_dim, int num, uint64_t seed,
              const SolverConfig& cfg);

// Plain (non-augmented) forward solve of dy/dt = v from x at t0; exposes the
// accepted mesh for trajectory export.
OdeSolution flow_forward(Tape& tape, const VelocityFn& v, const Tensor& x,
                         const SolverConfig& cfg);

// Row-wise standard normal log density, batch x 1.
Var standard_normal_logpdf(Tape& tape, const Var& z);

// Model checkpoint I/O (JSON, magic header "CNFTPR1").
void save_checkpoint(const std::string& path, const FlowModel& model,
                     const std::string& dataset);
struct CheckpointInfo {
  FlowModel model;
  std::string dataset;
};
CheckpointInfo load_checkpoint(Tape& tape, const std::string& path);

}  // namespace cnftpr
