#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "cnftpr/tensor.hpp"

namespace cnftpr {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is rewound
// past the node. Every differentiable quantity in the system is a Var.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  int rows() const;
  int cols() const;
  double item() const { return value().item(); }
};

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kAffine,          // a*x + b, scalar broadcast
  kMatMul,          // ip = {ta, tb}
  kTanh,
  kSigmoid,
  kSoftplus,
  kExp,
  kLog,
  kSquare,
  kOneMinusSquare,  // 1 - x^2
  kSum,             // -> 1x1
  kMean,            // -> 1x1
  kRowSum,          // (R,C) -> (R,1)
  kColSum,          // (R,C) -> (1,C)
  kConcat,          // ip = {axis}
  kSlice,           // ip = {r0, c0}
  kPad,             // ip = {r0, c0}; zero-extends a block to (rows, cols)
  kReshape,
  kRowMul,          // (R,C) * (1,C) row broadcast
  kRowAdd,          // (R,C) + (1,C) row broadcast
  kLinComb,         // sum_i dp[i] * X_i, identical shapes
};

struct Node {
  Op op;
  Tensor value;
  std::vector<int> in;
  std::vector<double> dp;  // per-op real parameters (affine {a,b}, lincomb coeffs)
  std::vector<int> ip;     // per-op int parameters
};

// node id -> gradient tensor
using GradMap = std::unordered_map<int, Tensor>;

// Append-only reverse-mode tape. Recording order is topological order;
// the backward pass traverses it exactly once in reverse. Single-threaded
// per tape; independent tapes may run concurrently.
class Tape {
 public:
  Var leaf(Tensor v);
  Var constant(Tensor v);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var x);
  Var affine(Var x, double a, double b);  // a*x + b
  Var matmul(Var a, Var b, bool ta = false, bool tb = false);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var softplus(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var square(Var x);
  Var one_minus_square(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var row_sum(Var x);
  Var col_sum(Var x);
  Var concat(std::span<const Var> xs, int axis);
  Var slice(Var x, int r0, int nr, int c0, int nc);
  Var pad(Var x, int r0, int c0, int out_rows, int out_cols);
  Var reshape(Var x, int r, int c);
  Var row_mul(Var x, Var row);
  Var row_add(Var x, Var row);
  Var lincomb(std::span<const Var> xs, std::span<const double> coeffs);

  // Numeric reverse pass for a scalar output. Returns gradients for every
  // leaf (zero for unreached leaves) plus any nodes listed in `extra`.
  GradMap backward(Var output, std::span<const Var> extra = {}) const;

  // Numeric vector-Jacobian product: cotangent^T * d(output)/d(leaves).
  GradMap vjp_values(Var output, const Tensor& cotangent,
                     std::span<const Var> extra = {}) const;

  // Differentiable VJP: the adjoint computation is emitted as recorded ops,
  // so the returned Vars can appear in further forward computation and be
  // differentiated again by the numeric pass. One adjoint list (aligned
  // with `wrt`) is returned per cotangent; factor subgraphs are shared
  // across cotangents. Supported over the op set used by smooth forward
  // graphs (arithmetic, matmul, activations, broadcasts, reductions,
  // shape ops).
  std::vector<std::vector<Var>> vjp(Var output, std::span<const Var> cotangents,
                                    std::span<const Var> wrt);

  size_t mark() const { return nodes_.size(); }
  void rewind(size_t m);
  size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[id]; }
  Tensor& mutable_value(Var v);  // in-place update of leaf values (optimizer path)
  const std::vector<int>& leaves() const { return leaves_; }

 private:
  friend struct Var;
  int push(Node n);
  Var make(Op op, Tensor value, std::vector<int> in, std::vector<double> dp = {},
           std::vector<int> ip = {});
  void check_tape(Var v) const;
  void backward_seed(Var output, const Tensor& seed, GradMap& out,
                     std::span<const Var> extra) const;

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
};

// Operator sugar for tape expressions.
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var x) { return x.tape->neg(x); }

}  // namespace cnftpr
