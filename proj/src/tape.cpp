#include "cnftpr/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace cnftpr {

const Tensor& Var::value() const { return tape->node(id).value; }
int Var::rows() const { return value().rows; }
int Var::cols() const { return value().cols; }

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("tape: " + msg); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    fail(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

double softplus_val(double x) {
  // log(1 + e^x), stable for large |x|
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void Tape::check_tape(Var v) const {
  if (!v.valid() || v.tape != this || v.id >= static_cast<int>(nodes_.size()))
    fail("Var does not belong to this tape");
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::make(Op op, Tensor value, std::vector<int> in, std::vector<double> dp,
               std::vector<int> ip) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.in = std::move(in);
  n.dp = std::move(dp);
  n.ip = std::move(ip);
  return Var{this, push(std::move(n))};
}

Var Tape::leaf(Tensor v) {
  Var out = make(Op::kLeaf, std::move(v), {});
  leaves_.push_back(out.id);
  return out;
}

Var Tape::constant(Tensor v) { return make(Op::kConst, std::move(v), {}); }

Var Tape::add(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor &va = a.value(), &vb = b.value();
  check_same_shape(va, vb, "add");
  Tensor out = va;
  for (int i = 0; i < out.size(); ++i) out.d[i] += vb.d[i];
  return make(Op::kAdd, std::move(out), {a.id, b.id});
}

Var Tape::sub(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor &va = a.value(), &vb = b.value();
  check_same_shape(va, vb, "sub");
  Tensor out = va;
  for (int i = 0; i < out.size(); ++i) out.d[i] -= vb.d[i];
  return make(Op::kSub, std::move(out), {a.id, b.id});
}

Var Tape::mul(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor &va = a.value(), &vb = b.value();
  check_same_shape(va, vb, "mul");
  Tensor out = va;
  for (int i = 0; i < out.size(); ++i) out.d[i] *= vb.d[i];
  return make(Op::kMul, std::move(out), {a.id, b.id});
}

Var Tape::div(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor &va = a.value(), &vb = b.value();
  check_same_shape(va, vb, "div");
  Tensor out = va;
  for (int i = 0; i < out.size(); ++i) out.d[i] /= vb.d[i];
  return make(Op::kDiv, std::move(out), {a.id, b.id});
}

Var Tape::neg(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = -v;
  return make(Op::kNeg, std::move(out), {x.id});
}

Var Tape::affine(Var x, double a, double b) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = a * v + b;
  return make(Op::kAffine, std::move(out), {x.id}, {a, b});
}

Var Tape::matmul(Var a, Var b, bool ta, bool tb) {
  check_tape(a);
  check_tape(b);
  Tensor out = cnftpr::matmul(a.value(), b.value(), ta, tb);
  return make(Op::kMatMul, std::move(out), {a.id, b.id}, {}, {ta ? 1 : 0, tb ? 1 : 0});
}

Var Tape::tanh(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = std::tanh(v);
  return make(Op::kTanh, std::move(out), {x.id});
}

Var Tape::sigmoid(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = sigmoid_val(v);
  return make(Op::kSigmoid, std::move(out), {x.id});
}

Var Tape::softplus(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = softplus_val(v);
  return make(Op::kSoftplus, std::move(out), {x.id});
}

Var Tape::exp(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = std::exp(v);
  return make(Op::kExp, std::move(out), {x.id});
}

Var Tape::log(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = std::log(v);
  return make(Op::kLog, std::move(out), {x.id});
}

Var Tape::square(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = v * v;
  return make(Op::kSquare, std::move(out), {x.id});
}

Var Tape::one_minus_square(Var x) {
  check_tape(x);
  Tensor out = x.value();
  for (double& v : out.d) v = 1.0 - v * v;
  return make(Op::kOneMinusSquare, std::move(out), {x.id});
}

Var Tape::sum(Var x) {
  check_tape(x);
  double s = 0.0;
  for (double v : x.value().d) s += v;
  return make(Op::kSum, Tensor::scalar(s), {x.id});
}

Var Tape::mean(Var x) {
  check_tape(x);
  double s = 0.0;
  for (double v : x.value().d) s += v;
  return make(Op::kMean, Tensor::scalar(s / x.value().size()), {x.id});
}

Var Tape::row_sum(Var x) {
  check_tape(x);
  const Tensor& v = x.value();
  Tensor out(v.rows, 1);
  for (int i = 0; i < v.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < v.cols; ++j) s += v.at(i, j);
    out.at(i, 0) = s;
  }
  return make(Op::kRowSum, std::move(out), {x.id});
}

Var Tape::col_sum(Var x) {
  check_tape(x);
  const Tensor& v = x.value();
  Tensor out(1, v.cols);
  for (int i = 0; i < v.rows; ++i)
    for (int j = 0; j < v.cols; ++j) out.at(0, j) += v.at(i, j);
  return make(Op::kColSum, std::move(out), {x.id});
}

Var Tape::concat(std::span<const Var> xs, int axis) {
  if (xs.empty()) fail("concat: no inputs");
  if (axis != 0 && axis != 1) fail("concat: axis must be 0 or 1");
  std::vector<int> ids;
  int rows = xs[0].rows(), cols = xs[0].cols();
  for (const Var& x : xs) {
    check_tape(x);
    ids.push_back(x.id);
  }
  if (axis == 0) {
    rows = 0;
    for (const Var& x : xs) {
      if (x.cols() != cols) fail("concat axis 0: column counts differ");
      rows += x.rows();
    }
  } else {
    cols = 0;
    for (const Var& x : xs) {
      if (x.rows() != rows) fail("concat axis 1: row counts differ");
      cols += x.cols();
    }
  }
  Tensor out(rows, cols);
  int off = 0;
  for (const Var& x : xs) {
    const Tensor& v = x.value();
    if (axis == 0) {
      std::copy(v.d.begin(), v.d.end(), out.d.begin() + static_cast<size_t>(off) * cols);
      off += v.rows;
    } else {
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < v.cols; ++j) out.at(i, off + j) = v.at(i, j);
      off += v.cols;
    }
  }
  return make(Op::kConcat, std::move(out), std::move(ids), {}, {axis});
}

Var Tape::slice(Var x, int r0, int nr, int c0, int nc) {
  check_tape(x);
  const Tensor& v = x.value();
  if (r0 < 0 || c0 < 0 || r0 + nr > v.rows || c0 + nc > v.cols || nr <= 0 || nc <= 0)
    fail("slice: block out of range");
  Tensor out(nr, nc);
  for (int i = 0; i < nr; ++i)
    for (int j = 0; j < nc; ++j) out.at(i, j) = v.at(r0 + i, c0 + j);
  return make(Op::kSlice, std::move(out), {x.id}, {}, {r0, c0});
}

Var Tape::pad(Var x, int r0, int c0, int out_rows, int out_cols) {
  check_tape(x);
  const Tensor& v = x.value();
  if (r0 < 0 || c0 < 0 || r0 + v.rows > out_rows || c0 + v.cols > out_cols)
    fail("pad: block out of range");
  Tensor out(out_rows, out_cols);
  for (int i = 0; i < v.rows; ++i)
    for (int j = 0; j < v.cols; ++j) out.at(r0 + i, c0 + j) = v.at(i, j);
  return make(Op::kPad, std::move(out), {x.id}, {}, {r0, c0});
}

Var Tape::reshape(Var x, int r, int c) {
  check_tape(x);
  const Tensor& v = x.value();
  if (r * c != v.size()) fail("reshape: element count mismatch");
  Tensor out(r, c);
  out.d = v.d;
  return make(Op::kReshape, std::move(out), {x.id});
}

Var Tape::row_mul(Var x, Var row) {
  check_tape(x);
  check_tape(row);
  const Tensor &v = x.value(), &r = row.value();
  if (r.rows != 1 || r.cols != v.cols) fail("row_mul: row must be 1x" + std::to_string(v.cols));
  Tensor out = v;
  for (int i = 0; i < v.rows; ++i)
    for (int j = 0; j < v.cols; ++j) out.at(i, j) *= r.at(0, j);
  return make(Op::kRowMul, std::move(out), {x.id, row.id});
}

Var Tape::row_add(Var x, Var row) {
  check_tape(x);
  check_tape(row);
  const Tensor &v = x.value(), &r = row.value();
  if (r.rows != 1 || r.cols != v.cols) fail("row_add: row must be 1x" + std::to_string(v.cols));
  Tensor out = v;
  for (int i = 0; i < v.rows; ++i)
    for (int j = 0; j < v.cols; ++j) out.at(i, j) += r.at(0, j);
  return make(Op::kRowAdd, std::move(out), {x.id, row.id});
}

Var Tape::lincomb(std::span<const Var> xs, std::span<const double> coeffs) {
  if (xs.empty() || xs.size() != coeffs.size()) fail("lincomb: inputs/coeffs mismatch");
  std::vector<int> ids;
  const Tensor& first = xs[0].value();
  Tensor out(first.rows, first.cols);
  for (size_t k = 0; k < xs.size(); ++k) {
    check_tape(xs[k]);
    check_same_shape(first, xs[k].value(), "lincomb");
    ids.push_back(xs[k].id);
    const double c = coeffs[k];
    const Tensor& v = xs[k].value();
    for (int i = 0; i < out.size(); ++i) out.d[i] += c * v.d[i];
  }
  return make(Op::kLinComb, std::move(out), std::move(ids),
              std::vector<double>(coeffs.begin(), coeffs.end()));
}

void Tape::rewind(size_t m) {
  if (m > nodes_.size()) fail("rewind: mark beyond tape end");
  nodes_.resize(m);
  while (!leaves_.empty() && leaves_.back() >= static_cast<int>(m)) leaves_.pop_back();
}

Tensor& Tape::mutable_value(Var v) {
  check_tape(v);
  return nodes_[v.id].value;
}

// ---------------------------------------------------------------------------
// Numeric reverse pass
// ---------------------------------------------------------------------------

namespace {

// Accumulate adjoint contribution into slot, allocating on first use.
void accum(Tensor& slot, const Tensor& contrib) {
  if (slot.rows == 0) {
    slot = contrib;
  } else {
    for (int i = 0; i < slot.size(); ++i) slot.d[i] += contrib.d[i];
  }
}

Tensor& ensure(Tensor& slot, int r, int c) {
  if (slot.rows == 0) slot = Tensor(r, c);
  return slot;
}

}  // namespace

void Tape::backward_seed(Var output, const Tensor& seed, GradMap& out,
                         std::span<const Var> extra) const {
  check_tape(output);
  if (!seed.same_shape(output.value()))
    fail("backward: seed shape " + seed.shape_str() + " does not match output " +
         output.value().shape_str());

  std::vector<Tensor> adj(output.id + 1);
  adj[output.id] = seed;

  std::vector<char> keep(output.id + 1, 0);
  for (const Var& v : extra) {
    check_tape(v);
    if (v.id <= output.id) keep[v.id] = 1;
  }

  for (int i = output.id; i >= 0; --i) {
    if (adj[i].rows == 0) continue;
    const Node& n = nodes_[i];
    const Tensor& a = adj[i];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kAdd:
        accum(adj[n.in[0]], a);
        accum(adj[n.in[1]], a);
        break;
      case Op::kSub: {
        accum(adj[n.in[0]], a);
        Tensor& t = ensure(adj[n.in[1]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] -= a.d[k];
        break;
      }
      case Op::kMul: {
        const Tensor &va = nodes_[n.in[0]].value, &vb = nodes_[n.in[1]].value;
        if (nodes_[n.in[0]].op != Op::kConst) {
          Tensor& t0 = ensure(adj[n.in[0]], a.rows, a.cols);
          for (int k = 0; k < a.size(); ++k) t0.d[k] += a.d[k] * vb.d[k];
        }
        if (nodes_[n.in[1]].op != Op::kConst) {
          Tensor& t1 = ensure(adj[n.in[1]], a.rows, a.cols);
          for (int k = 0; k < a.size(); ++k) t1.d[k] += a.d[k] * va.d[k];
        }
        break;
      }
      case Op::kDiv: {
        const Tensor& vb = nodes_[n.in[1]].value;
        Tensor& t0 = ensure(adj[n.in[0]], a.rows, a.cols);
        Tensor& t1 = ensure(adj[n.in[1]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) {
          t0.d[k] += a.d[k] / vb.d[k];
          t1.d[k] -= a.d[k] * n.value.d[k] / vb.d[k];
        }
        break;
      }
      case Op::kNeg: {
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] -= a.d[k];
        break;
      }
      case Op::kAffine: {
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        const double c = n.dp[0];
        for (int k = 0; k < a.size(); ++k) t.d[k] += c * a.d[k];
        break;
      }
      case Op::kMatMul: {
        const bool ta = n.ip[0] != 0, tb = n.ip[1] != 0;
        const Tensor &A = nodes_[n.in[0]].value, &B = nodes_[n.in[1]].value;
        // Constants never need gradients; skip their dgemm.
        if (nodes_[n.in[0]].op != Op::kConst) {
          Tensor& t = ensure(adj[n.in[0]], A.rows, A.cols);
          if (!ta)
            cnftpr::matmul_acc(t, a, B, false, !tb);
          else
            cnftpr::matmul_acc(t, B, a, tb, true);
        }
        if (nodes_[n.in[1]].op != Op::kConst) {
          Tensor& t = ensure(adj[n.in[1]], B.rows, B.cols);
          if (!tb)
            cnftpr::matmul_acc(t, A, a, !ta, false);
          else
            cnftpr::matmul_acc(t, a, A, true, ta);
        }
        break;
      }
      case Op::kTanh: {
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k)
          t.d[k] += a.d[k] * (1.0 - n.value.d[k] * n.value.d[k]);
        break;
      }
      case Op::kSigmoid: {
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k)
          t.d[k] += a.d[k] * n.value.d[k] * (1.0 - n.value.d[k]);
        break;
      }
      case Op::kSoftplus: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] += a.d[k] * sigmoid_val(vx.d[k]);
        break;
      }
      case Op::kExp: {
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] += a.d[k] * n.value.d[k];
        break;
      }
      case Op::kLog: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] += a.d[k] / vx.d[k];
        break;
      }
      case Op::kSquare: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] += 2.0 * a.d[k] * vx.d[k];
        break;
      }
      case Op::kOneMinusSquare: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], a.rows, a.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] -= 2.0 * a.d[k] * vx.d[k];
        break;
      }
      case Op::kSum: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        const double s = a.item();
        for (double& v : t.d) v += s;
        break;
      }
      case Op::kMean: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        const double s = a.item() / vx.size();
        for (double& v : t.d) v += s;
        break;
      }
      case Op::kRowSum: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        for (int r = 0; r < vx.rows; ++r)
          for (int c = 0; c < vx.cols; ++c) t.at(r, c) += a.at(r, 0);
        break;
      }
      case Op::kColSum: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        for (int r = 0; r < vx.rows; ++r)
          for (int c = 0; c < vx.cols; ++c) t.at(r, c) += a.at(0, c);
        break;
      }
      case Op::kConcat: {
        const int axis = n.ip[0];
        int off = 0;
        for (int inp : n.in) {
          const Tensor& vx = nodes_[inp].value;
          Tensor& t = ensure(adj[inp], vx.rows, vx.cols);
          if (axis == 0) {
            for (int r = 0; r < vx.rows; ++r)
              for (int c = 0; c < vx.cols; ++c) t.at(r, c) += a.at(off + r, c);
            off += vx.rows;
          } else {
            for (int r = 0; r < vx.rows; ++r)
              for (int c = 0; c < vx.cols; ++c) t.at(r, c) += a.at(r, off + c);
            off += vx.cols;
          }
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        const int r0 = n.ip[0], c0 = n.ip[1];
        for (int r = 0; r < a.rows; ++r)
          for (int c = 0; c < a.cols; ++c) t.at(r0 + r, c0 + c) += a.at(r, c);
        break;
      }
      case Op::kPad: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        const int r0 = n.ip[0], c0 = n.ip[1];
        for (int r = 0; r < vx.rows; ++r)
          for (int c = 0; c < vx.cols; ++c) t.at(r, c) += a.at(r0 + r, c0 + c);
        break;
      }
      case Op::kReshape: {
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& t = ensure(adj[n.in[0]], vx.rows, vx.cols);
        for (int k = 0; k < a.size(); ++k) t.d[k] += a.d[k];
        break;
      }
      case Op::kRowMul: {
        const Tensor &vx = nodes_[n.in[0]].value, &vr = nodes_[n.in[1]].value;
        Tensor& tx = ensure(adj[n.in[0]], vx.rows, vx.cols);
        Tensor& tr = ensure(adj[n.in[1]], 1, vx.cols);
        for (int r = 0; r < vx.rows; ++r)
          for (int c = 0; c < vx.cols; ++c) {
            tx.at(r, c) += a.at(r, c) * vr.at(0, c);
            tr.at(0, c) += a.at(r, c) * vx.at(r, c);
          }
        break;
      }
      case Op::kRowAdd: {
        accum(adj[n.in[0]], a);
        const Tensor& vx = nodes_[n.in[0]].value;
        Tensor& tr = ensure(adj[n.in[1]], 1, vx.cols);
        for (int r = 0; r < vx.rows; ++r)
          for (int c = 0; c < vx.cols; ++c) tr.at(0, c) += a.at(r, c);
        break;
      }
      case Op::kLinComb: {
        for (size_t k = 0; k < n.in.size(); ++k) {
          Tensor& t = ensure(adj[n.in[k]], a.rows, a.cols);
          const double c = n.dp[k];
          for (int j = 0; j < a.size(); ++j) t.d[j] += c * a.d[j];
        }
        break;
      }
    }
    // Release adjoint storage unless the caller asked for this node.
    if (n.op == Op::kLeaf || keep[i]) {
      out.emplace(i, std::move(adj[i]));
    }
    adj[i] = Tensor();
  }

  for (int id : leaves_) {
    if (id <= output.id && out.find(id) == out.end()) {
      const Tensor& v = nodes_[id].value;
      out.emplace(id, Tensor::zeros(v.rows, v.cols));
    }
  }
  for (const Var& v : extra) {
    if (out.find(v.id) == out.end()) {
      const Tensor& t = v.value();
      out.emplace(v.id, Tensor::zeros(t.rows, t.cols));
    }
  }
}

GradMap Tape::backward(Var output, std::span<const Var> extra) const {
  check_tape(output);
  if (output.value().rows != 1 || output.value().cols != 1)
    fail("backward: output must be scalar, got " + output.value().shape_str());
  GradMap out;
  backward_seed(output, Tensor::scalar(1.0), out, extra);
  return out;
}

GradMap Tape::vjp_values(Var output, const Tensor& cotangent,
                         std::span<const Var> extra) const {
  GradMap out;
  backward_seed(output, cotangent, out, extra);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable VJP (adjoints emitted as recorded ops)
// ---------------------------------------------------------------------------

std::vector<std::vector<Var>> Tape::vjp(Var output, std::span<const Var> cotangents,
                                        std::span<const Var> wrt) {
  check_tape(output);
  for (const Var& c : cotangents) {
    check_tape(c);
    check_same_shape(c.value(), output.value(), "vjp cotangent");
  }
  int lo = output.id;
  for (const Var& w : wrt) {
    check_tape(w);
    lo = std::min(lo, w.id);
  }

  // dep[i]: node i depends on some wrt node.
  std::vector<char> dep(output.id + 1, 0);
  for (const Var& w : wrt)
    if (w.id <= output.id) dep[w.id] = 1;
  for (int i = lo; i <= output.id; ++i) {
    if (dep[i]) continue;
    for (int inp : nodes_[i].in)
      if (inp >= lo && dep[inp]) {
        dep[i] = 1;
        break;
      }
  }

  // need[i]: output depends on node i.
  std::vector<char> need(output.id + 1, 0);
  {
    std::vector<int> stack{output.id};
    need[output.id] = 1;
    while (!stack.empty()) {
      int i = stack.back();
      stack.pop_back();
      for (int inp : nodes_[i].in)
        if (inp >= lo && !need[inp]) {
          need[inp] = 1;
          stack.push_back(inp);
        }
    }
  }

  std::vector<std::vector<Var>> results;
  std::unordered_map<int, Var> factor_memo;  // forward node id -> shared local factor

  // Emitting adjoint ops appends to nodes_ and may reallocate it, so the
  // rules below work from copies of the node metadata, never held references.
  auto shape_of = [&](int id) { return std::pair<int, int>{nodes_[id].value.rows, nodes_[id].value.cols}; };

  auto local_factor = [&](int id) -> Var {
    auto it = factor_memo.find(id);
    if (it != factor_memo.end()) return it->second;
    const Op op = nodes_[id].op;
    const int in0 = nodes_[id].in[0];
    Var src{this, id};
    Var fac;
    switch (op) {
      case Op::kTanh:
        fac = one_minus_square(src);
        break;
      case Op::kSigmoid:
        fac = mul(src, affine(src, -1.0, 1.0));
        break;
      case Op::kSoftplus:
        fac = sigmoid(Var{this, in0});
        break;
      default:
        fail("vjp: no local factor for op");
    }
    factor_memo.emplace(id, fac);
    return fac;
  };

  for (const Var& cot : cotangents) {
    std::vector<Var> adj(output.id + 1, Var{});
    adj[output.id] = cot;

    auto give = [&](int dst, Var contrib) {
      if (!dep[dst]) return;
      if (adj[dst].valid())
        adj[dst] = add(adj[dst], contrib);
      else
        adj[dst] = contrib;
    };

    for (int i = output.id; i >= lo; --i) {
      if (!dep[i] || !need[i] || !adj[i].valid()) continue;
      const Op op = nodes_[i].op;
      const std::vector<int> in = nodes_[i].in;
      const std::vector<double> dp = nodes_[i].dp;
      const std::vector<int> ip = nodes_[i].ip;
      Var a = adj[i];
      switch (op) {
        case Op::kLeaf:
        case Op::kConst:
          break;
        case Op::kAdd:
          give(in[0], a);
          give(in[1], a);
          break;
        case Op::kSub:
          give(in[0], a);
          if (dep[in[1]]) give(in[1], neg(a));
          break;
        case Op::kMul:
          if (dep[in[0]]) give(in[0], mul(a, Var{this, in[1]}));
          if (dep[in[1]]) give(in[1], mul(a, Var{this, in[0]}));
          break;
        case Op::kDiv: {
          Var b{this, in[1]};
          if (dep[in[0]]) give(in[0], div(a, b));
          if (dep[in[1]]) give(in[1], neg(div(mul(a, Var{this, i}), b)));
          break;
        }
        case Op::kNeg:
          give(in[0], neg(a));
          break;
        case Op::kAffine:
          give(in[0], affine(a, dp[0], 0.0));
          break;
        case Op::kMatMul: {
          const bool ta = ip[0] != 0, tb = ip[1] != 0;
          Var A{this, in[0]}, B{this, in[1]};
          if (dep[in[0]])
            give(in[0], !ta ? matmul(a, B, false, !tb) : matmul(B, a, tb, true));
          if (dep[in[1]])
            give(in[1], !tb ? matmul(A, a, !ta, false) : matmul(a, A, true, ta));
          break;
        }
        case Op::kTanh:
        case Op::kSigmoid:
        case Op::kSoftplus:
          give(in[0], mul(a, local_factor(i)));
          break;
        case Op::kExp:
          give(in[0], mul(a, Var{this, i}));
          break;
        case Op::kLog:
          give(in[0], div(a, Var{this, in[0]}));
          break;
        case Op::kSquare:
          give(in[0], mul(a, affine(Var{this, in[0]}, 2.0, 0.0)));
          break;
        case Op::kOneMinusSquare:
          give(in[0], mul(a, affine(Var{this, in[0]}, -2.0, 0.0)));
          break;
        case Op::kSum:
        case Op::kMean: {
          const auto [xr, xc] = shape_of(in[0]);
          Var col = matmul(constant(Tensor::ones(xr, 1)), a);
          Var fullv = matmul(col, constant(Tensor::ones(1, xc)));
          if (op == Op::kMean) fullv = affine(fullv, 1.0 / (xr * xc), 0.0);
          give(in[0], fullv);
          break;
        }
        case Op::kRowSum: {
          const auto [xr, xc] = shape_of(in[0]);
          (void)xr;
          give(in[0], matmul(a, constant(Tensor::ones(1, xc))));
          break;
        }
        case Op::kColSum: {
          const auto [xr, xc] = shape_of(in[0]);
          (void)xc;
          give(in[0], matmul(constant(Tensor::ones(xr, 1)), a));
          break;
        }
        case Op::kConcat: {
          const int axis = ip[0];
          int off = 0;
          for (int inp : in) {
            const auto [xr, xc] = shape_of(inp);
            if (axis == 0) {
              give(inp, slice(a, off, xr, 0, xc));
              off += xr;
            } else {
              give(inp, slice(a, 0, xr, off, xc));
              off += xc;
            }
          }
          break;
        }
        case Op::kSlice: {
          const auto [xr, xc] = shape_of(in[0]);
          give(in[0], pad(a, ip[0], ip[1], xr, xc));
          break;
        }
        case Op::kPad: {
          const auto [xr, xc] = shape_of(in[0]);
          give(in[0], slice(a, ip[0], xr, ip[1], xc));
          break;
        }
        case Op::kReshape: {
          const auto [xr, xc] = shape_of(in[0]);
          give(in[0], reshape(a, xr, xc));
          break;
        }
        case Op::kRowMul: {
          Var x{this, in[0]}, r{this, in[1]};
          if (dep[in[0]]) give(in[0], row_mul(a, r));
          if (dep[in[1]]) give(in[1], col_sum(mul(a, x)));
          break;
        }
        case Op::kRowAdd:
          give(in[0], a);
          if (dep[in[1]]) give(in[1], col_sum(a));
          break;
        case Op::kLinComb:
          for (size_t k = 0; k < in.size(); ++k)
            give(in[k], affine(a, dp[k], 0.0));
          break;
      }
    }

    std::vector<Var> row;
    for (const Var& w : wrt) {
      if (w.id <= output.id && adj[w.id].valid())
        row.push_back(adj[w.id]);
      else
        row.push_back(constant(Tensor::zeros(w.rows(), w.cols())));
    }
    results.push_back(std::move(row));
  }
  return results;
}

}  // namespace cnftpr
