#include "cnftpr/tpr.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cnftpr {

SampleTimes sample_times(std::mt19937_64& rng, const TprConfig& cfg, double t0, double t1) {
  if (!(t1 > t0)) throw std::invalid_argument("sample_times: requires t0 < t1");
  const int n = cfg.num_taus;
  if (n < 2) throw std::invalid_argument("sample_times: need at least 2 times");
  const double min_gap = 1e-6 * (t1 - t0);
  std::uniform_real_distribution<double> uniform(t0, t1);

  SampleTimes st;
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<double> taus;
    if (cfg.pin_endpoints) {
      taus.push_back(t0);
      taus.push_back(t1);
      for (int i = 0; i < n - 2; ++i) taus.push_back(uniform(rng));
    } else {
      for (int i = 0; i < n; ++i) taus.push_back(uniform(rng));
    }
    std::sort(taus.begin(), taus.end());
    bool ok = true;
    for (int i = 0; i + 1 < n; ++i)
      if (taus[i + 1] - taus[i] < min_gap) {
        ok = false;
        break;
      }
    if (ok) {
      st.taus = std::move(taus);
      return st;
    }
  }
  st.taus.resize(n);
  for (int i = 0; i < n; ++i) st.taus[i] = t0 + (t1 - t0) * i / (n - 1);
  return st;
}

ThinSvd thin_svd(const Tensor& A) {
  const int m = A.rows, n = A.cols;
  if (m < n) throw std::invalid_argument("thin_svd: expects rows >= cols");
  Tensor B = A;  // columns rotated in place until pairwise orthogonal
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (int i = 0; i < m; ++i) {
          app += B.at(i, p) * B.at(i, p);
          aqq += B.at(i, q) * B.at(i, q);
          apq += B.at(i, p) * B.at(i, q);
        }
        off = std::max(off, std::fabs(apq) / std::sqrt(app * aqq + 1e-300));
        if (std::fabs(apq) < 1e-15 * std::sqrt(app * aqq) + 1e-300) continue;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int i = 0; i < m; ++i) {
          const double bp = B.at(i, p), bq = B.at(i, q);
          B.at(i, p) = c * bp - s * bq;
          B.at(i, q) = s * bp + c * bq;
        }
      }
    }
    if (off < 1e-14) break;
  }

  ThinSvd result;
  result.sigma.resize(n);
  result.U = Tensor(m, n);
  std::vector<int> order(n);
  std::vector<double> norms(n);
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += B.at(i, j) * B.at(i, j);
    norms[j] = std::sqrt(s);
    order[j] = j;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return norms[a] > norms[b]; });
  for (int j = 0; j < n; ++j) {
    const int src = order[j];
    result.sigma[j] = norms[src];
    if (norms[src] < 1e-300)
      throw std::runtime_error("thin_svd: rank-deficient matrix");
    for (int i = 0; i < m; ++i) result.U.at(i, j) = B.at(i, src) / norms[src];
  }
  return result;
}

BasisMatrix polynomial_basis(const SampleTimes& st, int degree, double t0, double t1) {
  const int n = static_cast<int>(st.taus.size());
  if (degree < 0 || degree + 1 > n)
    throw std::invalid_argument("polynomial_basis: need degree + 1 <= n");
  BasisMatrix basis;
  basis.t0 = t0;
  basis.t1 = t1;
  basis.T = Tensor(n, degree + 1);
  for (int i = 0; i < n; ++i) {
    const double s = 2.0 * (st.taus[i] - t0) / (t1 - t0) - 1.0;
    double pw = 1.0;
    for (int j = 0; j <= degree; ++j) {
      basis.T.at(i, j) = pw;
      pw *= s;
    }
  }
  basis.U = thin_svd(basis.T).U;
  return basis;
}

Var tpr_residual(Tape& tape, Var Y, const BasisMatrix& basis, int batch) {
  const int n = basis.U.rows;
  if (Y.rows() != n)
    throw std::invalid_argument("tpr_residual: Y has " + std::to_string(Y.rows()) +
                                " rows, basis has " + std::to_string(n));
  Var U = tape.constant(basis.U);  // projector is a constant: no gradient into tau or SVD
  Var UtY = tape.matmul(U, Y, true, false);
  Var proj = tape.matmul(U, UtY);
  Var resid = tape.sub(Y, proj);
  return tape.affine(tape.sum(tape.square(resid)), 1.0 / (n * static_cast<double>(batch)),
                     0.0);
}

Var tpr_loss(Tape& tape, const OdeSolution& solution, const SampleTimes& st,
             const TprConfig& cfg, int data_dim, double t0, double t1) {
  const int n = static_cast<int>(st.taus.size());
  std::vector<Var> rows;
  int batch = -1;
  for (double tau : st.taus) {
    auto it = solution.sampled_states.find(tau);
    if (it == solution.sampled_states.end())
      throw std::invalid_argument(
          "tpr_loss: no sampled state at tau=" + std::to_string(tau) +
          " (solver was not given it as a mandatory time)");
    Var state = it->second;
    batch = state.rows();
    Var y = tape.slice(state, 0, batch, 0, data_dim);
    rows.push_back(tape.reshape(y, 1, batch * data_dim));
  }
  Var Y = tape.concat(rows, 0);
  (void)n;
  return tpr_residual(tape, Y, polynomial_basis(st, cfg.degree, t0, t1), batch);
}

}  // namespace cnftpr
