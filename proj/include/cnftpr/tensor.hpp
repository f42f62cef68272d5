#pragma once

#include <string>
#include <vector>

namespace cnftpr {

// Dense row-major matrix of doubles. Scalars are 1x1, row vectors 1xN.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

  static Tensor scalar(double v);
  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double v);
  static Tensor ones(int r, int c) { return full(r, c, 1.0); }
  static Tensor from(int r, int c, std::initializer_list<double> vals);

  int size() const { return rows * cols; }
  double& at(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
  double item() const;  // requires 1x1
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;
  std::string shape_str() const;
};

// C = op(A) * op(B), op transposing when the flag is set. Shape-checked.
Tensor matmul(const Tensor& A, const Tensor& B, bool ta = false, bool tb = false);

// C += op(A) * op(B); C must already have the product shape.
void matmul_acc(Tensor& C, const Tensor& A, const Tensor& B, bool ta = false,
                bool tb = false);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace cnftpr
