#include "cnftpr/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

#ifdef CNFTPR_USE_CBLAS
#include <cblas.h>

#include <mutex>
// Single-threaded BLAS: keeps runs deterministic and lets paired runs own
// one core each.
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace cnftpr {

Tensor Tensor::scalar(double v) {
  Tensor t(1, 1);
  t.d[0] = v;
  return t;
}

Tensor Tensor::full(int r, int c, double v) {
  Tensor t(r, c);
  std::fill(t.d.begin(), t.d.end(), v);
  return t;
}

Tensor Tensor::from(int r, int c, std::initializer_list<double> vals) {
  Tensor t(r, c);
  if (static_cast<int>(vals.size()) != r * c)
    throw std::invalid_argument("Tensor::from: wrong element count");
  std::copy(vals.begin(), vals.end(), t.d.begin());
  return t;
}

double Tensor::item() const {
  if (rows != 1 || cols != 1)
    throw std::invalid_argument("Tensor::item: tensor is " + shape_str() + ", not 1x1");
  return d[0];
}

bool Tensor::all_finite() const {
  for (double v : d)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

namespace {

void matmul_naive(const Tensor& A, const Tensor& B, bool ta, bool tb, Tensor& C) {
  const int m = C.rows, n = C.cols, k = ta ? A.rows : A.cols;
  for (int i = 0; i < m; ++i) {
    double* crow = &C.d[static_cast<size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double a = ta ? A.at(p, i) : A.at(i, p);
      if (a == 0.0) continue;
      if (!tb) {
        const double* brow = &B.d[static_cast<size_t>(p) * n];
        for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += a * B.at(j, p);
      }
    }
  }
}

void matmul_impl(Tensor& C, const Tensor& A, const Tensor& B, bool ta, bool tb,
                 double beta) {
  const int m = ta ? A.cols : A.rows;
  const int ka = ta ? A.rows : A.cols;
  const int kb = tb ? B.cols : B.rows;
  const int n = tb ? B.rows : B.cols;
  if (ka != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree (" + A.shape_str() +
                                (ta ? "^T" : "") + " * " + B.shape_str() + (tb ? "^T" : "") +
                                ")");
  if (C.rows != m || C.cols != n)
    throw std::invalid_argument("matmul: output shape mismatch");
  if (m == 0 || n == 0 || ka == 0) return;
#ifdef CNFTPR_USE_CBLAS
  static std::once_flag once;
  std::call_once(once, [] {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
  });
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              m, n, ka, 1.0, A.d.data(), A.cols, B.d.data(), B.cols, beta, C.d.data(), n);
#else
  (void)beta;  // naive path always accumulates into C
  matmul_naive(A, B, ta, tb, C);
#endif
}

}  // namespace

Tensor matmul(const Tensor& A, const Tensor& B, bool ta, bool tb) {
  Tensor C(ta ? A.cols : A.rows, tb ? B.rows : B.cols);
  matmul_impl(C, A, B, ta, tb, 0.0);
  return C;
}

void matmul_acc(Tensor& C, const Tensor& A, const Tensor& B, bool ta, bool tb) {
  matmul_impl(C, A, B, ta, tb, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return std::nan("");
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.d[i] - b.d[i]));
  return m;
}

}  // namespace cnftpr
