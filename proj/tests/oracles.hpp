// Independent oracles used to freeze expected values: finite differences,
// normal-equations least squares, and quadrature. These never call the
// implementation paths they check.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cnftpr/tape.hpp"
#include "cnftpr/tensor.hpp"

namespace oracles {

using cnftpr::Tensor;

// Central-difference gradient of scalar_fn with respect to the entries of
// `storage` (perturbed in place and restored).
inline Tensor central_diff_grad(const std::function<double()>& scalar_fn, Tensor& storage,
                                double step = 1e-5) {
  Tensor grad(storage.rows, storage.cols);
  for (int i = 0; i < storage.size(); ++i) {
    const double orig = storage.d[i];
    storage.d[i] = orig + step;
    const double fp = scalar_fn();
    storage.d[i] = orig - step;
    const double fm = scalar_fn();
    storage.d[i] = orig;
    grad.d[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

// Jacobian d(vec_fn)/d(storage) column by column via central differences.
// vec_fn returns the flattened output.
inline std::vector<std::vector<double>> central_diff_jacobian(
    const std::function<std::vector<double>()>& vec_fn, Tensor& storage,
    double step = 1e-5) {
  const std::vector<double> base = vec_fn();
  std::vector<std::vector<double>> jac(base.size(),
                                       std::vector<double>(storage.size(), 0.0));
  for (int i = 0; i < storage.size(); ++i) {
    const double orig = storage.d[i];
    storage.d[i] = orig + step;
    const std::vector<double> fp = vec_fn();
    storage.d[i] = orig - step;
    const std::vector<double> fm = vec_fn();
    storage.d[i] = orig;
    for (size_t r = 0; r < base.size(); ++r) jac[r][i] = (fp[r] - fm[r]) / (2.0 * step);
  }
  return jac;
}

// Relative mismatch max_i |a_i - b_i| / max(floor, |b_i|).
inline double rel_err(const Tensor& got, const Tensor& want, double floor = 1e-7) {
  double worst = 0.0;
  for (int i = 0; i < got.size(); ++i)
    worst = std::max(worst,
                     std::fabs(got.d[i] - want.d[i]) / std::max(floor, std::fabs(want.d[i])));
  return worst;
}

// Least-squares residual through the normal equations (T^T T) C = T^T Y,
// solved by Gauss-Jordan elimination. Returns |Y - T C|_F^2 / (n * batch).
inline double normal_equations_residual(const Tensor& T, const Tensor& Y, int batch = 1) {
  using cnftpr::matmul;
  const int k = T.cols, m = Y.cols, n = T.rows;
  Tensor G = matmul(T, T, true, false);
  Tensor R = matmul(T, Y, true, false);
  for (int col = 0; col < k; ++col) {
    int piv = col;
    for (int r = col + 1; r < k; ++r)
      if (std::fabs(G.at(r, col)) > std::fabs(G.at(piv, col))) piv = r;
    if (piv != col) {
      for (int c = 0; c < k; ++c) std::swap(G.at(col, c), G.at(piv, c));
      for (int c = 0; c < m; ++c) std::swap(R.at(col, c), R.at(piv, c));
    }
    for (int r = 0; r < k; ++r) {
      if (r == col || G.at(r, col) == 0.0) continue;
      const double f = G.at(r, col) / G.at(col, col);
      for (int c = 0; c < k; ++c) G.at(r, c) -= f * G.at(col, c);
      for (int c = 0; c < m; ++c) R.at(r, c) -= f * R.at(col, c);
    }
  }
  Tensor C(k, m);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < m; ++c) C.at(r, c) = R.at(r, c) / G.at(r, r);
  const Tensor fit = matmul(T, C);
  double sse = 0.0;
  for (int i = 0; i < Y.size(); ++i) {
    const double d = Y.d[i] - fit.d[i];
    sse += d * d;
  }
  return sse / (static_cast<double>(n) * batch);
}

// Composite 2D trapezoid over a uniform grid of f-values (rows x cols).
inline double trapezoid_2d(const std::vector<double>& values, int rows, int cols, double hx,
                           double hy) {
  double acc = 0.0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double w = 1.0;
      if (i == 0 || i == rows - 1) w *= 0.5;
      if (j == 0 || j == cols - 1) w *= 0.5;
      acc += w * values[static_cast<size_t>(i) * cols + j];
    }
  return acc * hx * hy;
}

}  // namespace oracles
