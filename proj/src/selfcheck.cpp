#include "cnftpr/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "cnftpr/flow.hpp"
#include "cnftpr/ode.hpp"
#include "cnftpr/rng.hpp"
#include "cnftpr/tape.hpp"
#include "cnftpr/tpr.hpp"
#include "cnftpr/train.hpp"

namespace cnftpr {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

double normal_equations_residual(const Tensor& T, const Tensor& Y, int batch) {
  const int n = T.rows, k = T.cols, m = Y.cols;
  // G = T^T T, R = T^T Y
  Tensor G = matmul(T, T, true, false);
  Tensor R = matmul(T, Y, true, false);
  // Gaussian elimination with partial pivoting on [G | R].
  for (int col = 0; col < k; ++col) {
    int piv = col;
    for (int r = col + 1; r < k; ++r)
      if (std::fabs(G.at(r, col)) > std::fabs(G.at(piv, col))) piv = r;
    if (piv != col) {
      for (int c = 0; c < k; ++c) std::swap(G.at(col, c), G.at(piv, c));
      for (int c = 0; c < m; ++c) std::swap(R.at(col, c), R.at(piv, c));
    }
    const double diag = G.at(col, col);
    for (int r = 0; r < k; ++r) {
      if (r == col || G.at(r, col) == 0.0) continue;
      const double f = G.at(r, col) / diag;
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

std::vector<CheckResult> run_selftest(const SelftestOptions& opt) {
  std::vector<CheckResult> results;
  std::mt19937_64 rng = make_engine(42, 0x5E1F);

  // 1. Reverse-mode gradients of a small MLP loss against central differences.
  {
    Tape tape;
    std::mt19937_64 r = make_engine(3, 1);
    FlowModel model = FlowModel::create(tape, 2, {8, 8}, r);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor x(4, 2);
    for (double& v : x.d) v = normal(r);

    auto loss_of = [&]() {
      Var y = tape.constant(x);
      Var v = model.velocity(y, 0.3);
      return tape.mean(tape.square(v));
    };
    const size_t mark = tape.mark();
    Var loss = loss_of();
    GradMap grads = tape.backward(loss);
    double worst = 0.0;
    const double step = 1e-5;
    for (Var p : model.params()) {
      Tensor& w = tape.mutable_value(p);
      const Tensor& g = grads.at(p.id);
      for (int i = 0; i < w.size(); ++i) {
        const double orig = w.d[i];
        w.d[i] = orig + step;
        tape.rewind(mark);
        const double fp = loss_of().item();
        w.d[i] = orig - step;
        tape.rewind(mark);
        const double fm = loss_of().item();
        w.d[i] = orig;
        const double fd = (fp - fm) / (2.0 * step);
        const double rel = std::fabs(fd - g.d[i]) / std::max(1e-7, std::fabs(fd));
        worst = std::max(worst, rel);
      }
    }
    results.push_back(
        CheckResult{"autodiff-gradient", worst < 1e-4, "max rel err=" + fmt(worst)});
  }

  // 2. Solver order: halving the fixed step on y'=y cuts the error ~32x.
  {
    dopri5::corrupt_for_testing(opt.corrupt_tableau);
    auto err_at = [&](double h) {
      Tape tape;
      Dynamics f = [&tape](const Var& y, double) { return y; };
      Var y0 = tape.constant(Tensor::scalar(1.0));
      Var y1 = integrate_fixed(f, y0, 0.0, 1.0, h);
      return std::fabs(y1.item() - std::exp(1.0));
    };
    const double e1 = err_at(0.1), e2 = err_at(0.05);
    dopri5::corrupt_for_testing(0.0);
    const double ratio = e1 / e2;
    const bool pass = ratio > 32.0 * 0.8 && ratio < 32.0 * 1.2;
    results.push_back(
        CheckResult{"solver-order", pass, "error ratio under step halving=" + fmt(ratio)});
  }

  // 3. Degree-4 polynomial trajectory: the embedded error estimate vanishes.
  {
    dopri5::corrupt_for_testing(opt.corrupt_tableau);
    Tape tape;
    Dynamics f = [&tape](const Var&, double t) {
      return tape.constant(Tensor::scalar(t * t * t));
    };
    Var y0 = tape.constant(Tensor::scalar(0.0));
    Var k1 = f(y0, 0.0);
    StepResult step = dopri5_attempt_step(f, y0, k1, 0.0, 1.0);
    dopri5::corrupt_for_testing(0.0);
    const double err = std::fabs(step.error.item());
    results.push_back(CheckResult{"solver-quartic-exact", err < 1e-12,
                                  "one-step error estimate=" + fmt(err)});
  }

  // 4. TPR residual: SVD projector route equals the normal-equations route.
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double worst = 0.0;
    for (int reps = 0; reps < 200; ++reps) {
      const int n = 3 + static_cast<int>(uni(rng) * 6);          // 3..8
      const int d = std::min(n - 1, static_cast<int>(uni(rng) * 4));  // 0..3
      const int m = 1 + static_cast<int>(uni(rng) * 5);
      TprConfig cfg;
      cfg.num_taus = n;
      cfg.degree = d;
      SampleTimes st = sample_times(rng, cfg, 0.0, 1.0);
      BasisMatrix basis = polynomial_basis(st, d, 0.0, 1.0);
      Tensor Y(n, m);
      for (double& v : Y.d) v = normal(rng);
      Tape tape;
      const double got = tpr_residual(tape, tape.constant(Y), basis, 1).item();
      const double want = normal_equations_residual(basis.T, Y, 1);
      const double rel = std::fabs(got - want) / std::max(1e-300, std::fabs(want));
      if (want > 1e-12) worst = std::max(worst, rel);
    }
    results.push_back(
        CheckResult{"tpr-oracle-equivalence", worst < 1e-8, "max rel err=" + fmt(worst)});
  }

  // 5. Logged loss decomposes as L = L0 + alpha * L_p.
  {
    Tape tape;
    std::mt19937_64 r = make_engine(11, 2);
    FlowModel model = FlowModel::create(tape, 2, {8, 8}, r);
    TrainConfig cfg = TrainConfig::defaults();
    cfg.tpr_enabled = true;
    const double true_alpha = cfg.tpr.alpha;
    if (opt.flip_alpha_sign) cfg.tpr.alpha = -cfg.tpr.alpha;
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor batch(8, 2);
    for (double& v : batch.d) v = normal(r);
    std::mt19937_64 rng_tau = make_engine(11, 3), rng_eps = make_engine(11, 4);
    LossInfo info = loss_step(tape, model, batch, cfg, rng_tau, rng_eps);
    const double gap = std::fabs(info.total.item() - (info.l0 + true_alpha * info.lp));
    results.push_back(
        CheckResult{"loss-decomposition", gap < 1e-10, "|L - (L0 + alpha Lp)|=" + fmt(gap)});
  }

  // 6. Theory witnesses (fast subset).
  {
    for (const CheckResult& r : run_theory_checks(7)) {
      if (r.name == "transport-identity" || r.name == "box-divergence-free-2d")
        results.push_back(r);
    }
  }

  return results;
}

}  // namespace cnftpr
