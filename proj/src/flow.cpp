#include "cnftpr/flow.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "cnftpr/rng.hpp"

namespace cnftpr {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Tensor uniform_tensor(int r, int c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(r, c);
  for (double& v : t.d) v = dist(rng);
  return t;
}

// Trace of dv/dy per batch row from an already-recorded velocity output,
// via D recorded VJPs with basis cotangents (shared factor subgraphs).
Var exact_trace_of(Tape& tape, Var out, const Var& y) {
  const int batch = y.rows(), dim = y.cols();
  std::vector<Var> cotangents;
  for (int d = 0; d < dim; ++d) {
    Tensor mask(batch, dim);
    for (int i = 0; i < batch; ++i) mask.at(i, d) = 1.0;
    cotangents.push_back(tape.constant(std::move(mask)));
  }
  std::vector<Var> wrt{y};
  auto rows = tape.vjp(out, cotangents, wrt);
  Var trace;
  for (int d = 0; d < dim; ++d) {
    Var col = tape.slice(rows[d][0], 0, batch, d, 1);
    trace = trace.valid() ? tape.add(trace, col) : col;
  }
  return trace;
}

Var hutchinson_trace_of(Tape& tape, Var out, const Var& y, const std::vector<Tensor>& eps) {
  if (eps.empty()) throw std::invalid_argument("hutchinson_trace: needs at least one probe");
  const int batch = y.rows(), dim = y.cols();
  std::vector<Var> cotangents;
  for (const Tensor& e : eps) {
    if (e.rows != batch || e.cols != dim)
      throw std::invalid_argument("hutchinson_trace: probe shape " + e.shape_str() +
                                  " does not match state " + out.value().shape_str());
    cotangents.push_back(tape.constant(e));
  }
  std::vector<Var> wrt{y};
  auto rows = tape.vjp(out, cotangents, wrt);
  Var acc;
  for (size_t s = 0; s < eps.size(); ++s) {
    Var est = tape.row_sum(tape.mul(rows[s][0], cotangents[s]));
    acc = acc.valid() ? tape.add(acc, est) : est;
  }
  if (eps.size() > 1) acc = tape.affine(acc, 1.0 / eps.size(), 0.0);
  return acc;
}

}  // namespace

FlowModel FlowModel::create(Tape& tape, int data_dim, const std::vector<int>& hidden,
                            std::mt19937_64& rng) {
  FlowModel m;
  m.data_dim = data_dim;
  m.hidden = hidden;
  std::vector<int> dims{data_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(data_dim);
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i], out = dims[i + 1];
    const double k = 1.0 / std::sqrt(static_cast<double>(in));
    CsqLayer layer;
    layer.in = in;
    layer.out = out;
    layer.W = tape.leaf(uniform_tensor(in, out, -k, k, rng));
    layer.b = tape.leaf(uniform_tensor(1, out, -k, k, rng));
    layer.gate_w = tape.leaf(uniform_tensor(1, out, -1.0, 1.0, rng));
    layer.gate_b = tape.leaf(uniform_tensor(1, out, -1.0, 1.0, rng));
    layer.bias_w = tape.leaf(uniform_tensor(1, out, -1.0, 1.0, rng));
    m.layers.push_back(layer);
  }
  return m;
}

Var FlowModel::velocity(const Var& y, double t) const {
  if (y.cols() != data_dim)
    throw std::invalid_argument("velocity: input width " + std::to_string(y.cols()) +
                                " does not match data dim " + std::to_string(data_dim));
  Tape& tape = *y.tape;
  Var h = y;
  for (size_t i = 0; i < layers.size(); ++i) {
    const CsqLayer& L = layers[i];
    Var gate = tape.sigmoid(tape.add(tape.affine(L.gate_w, t, 0.0), L.gate_b));
    Var tbias = tape.affine(L.bias_w, t, 0.0);
    h = tape.row_add(tape.row_mul(tape.row_add(tape.matmul(h, L.W), L.b), gate), tbias);
    if (i + 1 < layers.size()) h = tape.tanh(h);
  }
  return h;
}

VelocityFn FlowModel::velocity_fn() const {
  return [m = *this](const Var& y, double t) { return m.velocity(y, t); };
}

std::vector<Var> FlowModel::params() const {
  std::vector<Var> ps;
  for (const CsqLayer& L : layers) {
    ps.push_back(L.W);
    ps.push_back(L.b);
    ps.push_back(L.gate_w);
    ps.push_back(L.gate_b);
    ps.push_back(L.bias_w);
  }
  return ps;
}

int FlowModel::num_params() const {
  int n = 0;
  for (const Var& p : params()) n += p.value().size();
  return n;
}

void FlowModel::zero_output_layer(Tape& tape) const {
  const CsqLayer& L = layers.back();
  for (Var p : {L.W, L.b, L.bias_w}) {
    Tensor& t = tape.mutable_value(p);
    std::fill(t.d.begin(), t.d.end(), 0.0);
  }
}

Var exact_trace(Tape& tape, const VelocityFn& v, const Var& y, double t) {
  return exact_trace_of(tape, v(y, t), y);
}

Tensor draw_rademacher(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.d) v = dist(rng) < 0.5 ? -1.0 : 1.0;
  return t;
}

Var hutchinson_trace(Tape& tape, const VelocityFn& v, const Var& y, double t,
                     const std::vector<Tensor>& eps) {
  return hutchinson_trace_of(tape, v(y, t), y, eps);
}

Dynamics make_augmented_dynamics(Tape& tape, const VelocityFn& v, int data_dim,
                                 const TraceMode& mode, std::vector<Tensor> eps) {
  return [&tape, v, data_dim, mode, eps = std::move(eps)](const Var& state, double t) {
    const int batch = state.rows();
    Var y = tape.slice(state, 0, batch, 0, data_dim);
    Var vel = v(y, t);
    Var trace = mode.kind == TraceMode::Kind::kExact
                    ? exact_trace_of(tape, vel, y)
                    : hutchinson_trace_of(tape, vel, y, eps);
    std::vector<Var> parts{vel, tape.neg(trace)};
    return tape.concat(parts, 1);
  };
}

Var standard_normal_logpdf(Tape& tape, const Var& z) {
  Var ss = tape.row_sum(tape.square(z));
  return tape.affine(ss, -0.5, -0.5 * z.cols() * kLog2Pi);
}

Likelihood log_likelihood(Tape& tape, const VelocityFn& v, int data_dim, const Tensor& x,
                          const SolverConfig& cfg, const TraceMode& mode,
                          std::vector<Tensor> eps) {
  if (x.cols != data_dim)
    throw std::invalid_argument("log_likelihood: batch width does not match data dim");
  if (!x.all_finite()) throw std::invalid_argument("log_likelihood: non-finite batch");
  if (mode.kind == TraceMode::Kind::kHutchinson && eps.empty())
    throw std::invalid_argument("log_likelihood: Hutchinson mode needs probes");
  const int batch = x.rows;

  Tensor aug0(batch, data_dim + 1);
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < data_dim; ++j) aug0.at(i, j) = x.at(i, j);
  Var state0 = tape.constant(std::move(aug0));

  Dynamics dyn = make_augmented_dynamics(tape, v, data_dim, mode, std::move(eps));
  Likelihood lk;
  lk.solution = integrate(dyn, state0, cfg);

  Var final_state = lk.solution.states.back();
  Var z = tape.slice(final_state, 0, batch, 0, data_dim);
  Var ell = tape.slice(final_state, 0, batch, data_dim, 1);
  lk.logq = tape.sub(standard_normal_logpdf(tape, z), ell);
  return lk;
}

Tensor sample(Tape& tape, const VelocityFn& v, int data_dim, int num, uint64_t seed,
              const SolverConfig& cfg) {
  std::mt19937_64 rng = make_engine(seed, 0x5A5A);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor z(num, data_dim);
  for (double& val : z.d) val = normal(rng);

  // Reverse time: integrate w(y, s) = -v(y, t0 + t1 - s) over [t0, t1].
  const double t0 = cfg.t0, t1 = cfg.t1;
  Dynamics reversed = [&tape, v, t0, t1](const Var& y, double s) {
    return tape.neg(v(y, t0 + t1 - s));
  };
  SolverConfig rcfg = cfg;
  rcfg.mandatory_times.clear();
  Var zvar = tape.constant(std::move(z));
  OdeSolution sol = integrate(reversed, zvar, rcfg);
  return sol.states.back().value();
}

OdeSolution flow_forward(Tape& tape, const VelocityFn& v, const Tensor& x,
                         const SolverConfig& cfg) {
  Dynamics dyn = [&tape, v](const Var& y, double t) { return v(y, t); };
  Var x0 = tape.constant(x);
  return integrate(dyn, x0, cfg);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kMagic = "CNFTPR1";
}

void save_checkpoint(const std::string& path, const FlowModel& model,
                     const std::string& dataset) {
  nlohmann::json j;
  j["magic"] = kMagic;
  j["dataset"] = dataset;
  j["data_dim"] = model.data_dim;
  j["hidden"] = model.hidden;
  nlohmann::json params = nlohmann::json::object();
  const char* field_names[5] = {"W", "b", "gate_w", "gate_b", "bias_w"};
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const CsqLayer& L = model.layers[li];
    const Var fields[5] = {L.W, L.b, L.gate_w, L.gate_b, L.bias_w};
    for (int f = 0; f < 5; ++f) {
      const Tensor& t = fields[f].value();
      nlohmann::json entry;
      entry["shape"] = {t.rows, t.cols};
      entry["data"] = t.d;
      params["layer" + std::to_string(li) + "." + field_names[f]] = std::move(entry);
    }
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump();
}

CheckpointInfo load_checkpoint(Tape& tape, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (!j.contains("magic") || j["magic"] != kMagic)
    throw std::runtime_error("load_checkpoint: bad magic header in " + path);

  CheckpointInfo info;
  info.dataset = j.value("dataset", "");
  const int data_dim = j["data_dim"].get<int>();
  const std::vector<int> hidden = j["hidden"].get<std::vector<int>>();
  std::mt19937_64 dummy(0);
  info.model = FlowModel::create(tape, data_dim, hidden, dummy);

  const char* field_names[5] = {"W", "b", "gate_w", "gate_b", "bias_w"};
  for (size_t li = 0; li < info.model.layers.size(); ++li) {
    CsqLayer& L = info.model.layers[li];
    Var fields[5] = {L.W, L.b, L.gate_w, L.gate_b, L.bias_w};
    for (int f = 0; f < 5; ++f) {
      const auto& entry = j["params"].at("layer" + std::to_string(li) + "." + field_names[f]);
      Tensor& t = tape.mutable_value(fields[f]);
      const auto shape = entry["shape"].get<std::vector<int>>();
      if (shape.size() != 2 || shape[0] != t.rows || shape[1] != t.cols)
        throw std::runtime_error("load_checkpoint: shape mismatch for layer " +
                                 std::to_string(li));
      const auto data = entry["data"].get<std::vector<double>>();
      if (static_cast<int>(data.size()) != t.size())
        throw std::runtime_error("load_checkpoint: element count mismatch");
      t.d = data;
    }
  }
  return info;
}

}  // namespace cnftpr
