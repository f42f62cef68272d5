#include "cnftpr/theory.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "cnftpr/rng.hpp"

namespace cnftpr {

namespace {
constexpr double kPi = 3.14159265358979323846;

double normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * kPi));
}
}  // namespace

Transport1D::Transport1D(Density1D p0, Density1D p1, double quad_lo, double quad_hi,
                         int quad_points)
    : p0_(std::move(p0)), p1_(std::move(p1)), lo_(quad_lo), hi_(quad_hi), n_(quad_points) {
  if (n_ < 3 || !(hi_ > lo_)) throw std::invalid_argument("Transport1D: bad quadrature grid");
  h_ = (hi_ - lo_) / (n_ - 1);
  dens0_.resize(n_);
  dens1_.resize(n_);
  cum0_.resize(n_);
  cum1_.resize(n_);
  for (int i = 0; i < n_; ++i) {
    const double x = lo_ + i * h_;
    dens0_[i] = p0_(x);
    dens1_[i] = p1_(x);
  }
  cum0_[0] = cum1_[0] = 0.0;
  for (int i = 1; i < n_; ++i) {
    cum0_[i] = cum0_[i - 1] + 0.5 * h_ * (dens0_[i - 1] + dens0_[i]);
    cum1_[i] = cum1_[i - 1] + 0.5 * h_ * (dens1_[i - 1] + dens1_[i]);
  }
  if (cum0_.back() < 0.999 || cum1_.back() < 0.999)
    throw std::invalid_argument("Transport1D: density mass below 0.999 on the grid range");
}

double Transport1D::cdf_eval(const std::vector<double>& cum, const std::vector<double>& dens,
                             double x) const {
  if (x <= lo_) return 0.0;
  if (x >= hi_) return cum.back();
  const double pos = (x - lo_) / h_;
  const int i = std::min(static_cast<int>(pos), n_ - 2);
  const double u = pos - i;
  // Exact integral of the piecewise-linear density: matches the trapezoid
  // node sums and keeps the derivative consistent with the density itself.
  return cum[i] + h_ * (dens[i] * u + 0.5 * (dens[i + 1] - dens[i]) * u * u);
}

double Transport1D::cdf0(double x) const { return cdf_eval(cum0_, dens0_, x); }
double Transport1D::cdf1(double x) const { return cdf_eval(cum1_, dens1_, x); }

double Transport1D::invert_cdf1(double target) const {
  double a = lo_, b = hi_;
  while (b - a > 1e-10) {
    const double m = 0.5 * (a + b);
    if (cdf_eval(cum1_, dens1_, m) < target)
      a = m;
    else
      b = m;
  }
  return 0.5 * (a + b);
}

double Transport1D::z_of_x(double x) const { return invert_cdf1(cdf0(x)); }

double Transport1D::dz_dx(double x, double step) const {
  return (z_of_x(x + step) - z_of_x(x - step)) / (2.0 * step);
}

double Transport1D::straight_line_flow(double x, double t, double t0, double t1) const {
  const double xi = (t - t0) / (t1 - t0);
  return x + xi * (z_of_x(x) - x);
}

bool BoxField::inside(const std::vector<double>& z) const {
  for (int i = 0; i < dim(); ++i)
    if (std::fabs(z[i]) >= L[i]) return false;
  return true;
}

std::vector<double> BoxField::u(const std::vector<double>& z) const {
  const int d = dim();
  std::vector<double> out(d, 0.0);
  if (!inside(z)) return out;
  for (int i = 0; i < d; ++i) {
    double v = -c[i] * (L[i] / kPi) * (1.0 + std::cos(z[i] * kPi / L[i]));
    for (int j = 0; j < d; ++j) {
      if (j == i) continue;
      v *= std::sin(z[j] * kPi / L[j]);
    }
    out[i] = v;
  }
  return out;
}

double BoxField::divergence_analytic(const std::vector<double>& z) const {
  if (!inside(z)) return 0.0;
  double csum = 0.0;
  for (double ci : c) csum += ci;
  double prod = 1.0;
  for (int i = 0; i < dim(); ++i) prod *= std::sin(z[i] * kPi / L[i]);
  return csum * prod;
}

double box_field_divergence(const BoxField& field, const std::vector<double>& z,
                            double step) {
  double div = 0.0;
  std::vector<double> zp = z, zm = z;
  for (int i = 0; i < field.dim(); ++i) {
    zp[i] = z[i] + step;
    zm[i] = z[i] - step;
    div += (field.u(zp)[i] - field.u(zm)[i]) / (2.0 * step);
    zp[i] = z[i];
    zm[i] = z[i];
  }
  return div;
}

VariationReport verify_variation_boundedness(const BoxField& field, const DensityND& p1,
                                             int grid_per_dim, double margin) {
  const int d = field.dim();
  if (d < 1 || grid_per_dim < 2)
    throw std::invalid_argument("verify_variation_boundedness: bad arguments");
  long total = 1;
  for (int i = 0; i < d; ++i) total *= grid_per_dim;

  auto point_at = [&](long idx) {
    std::vector<double> z(d);
    for (int i = 0; i < d; ++i) {
      const long k = idx % grid_per_dim;
      idx /= grid_per_dim;
      const double span = field.L[i] - margin;
      z[i] = -span + 2.0 * span * k / (grid_per_dim - 1);
    }
    return z;
  };

  auto vprime = [&](const std::vector<double>& z) {
    const double dens = p1(z);
    if (dens <= 0.0)
      throw std::invalid_argument("verify_variation_boundedness: density underflow in box");
    std::vector<double> v = field.u(z);
    for (double& vi : v) vi /= dens;
    return v;
  };

  VariationReport report;
  report.finite = true;
  const double fd_step = 1e-5;
  for (long idx = 0; idx < total; ++idx) {
    const std::vector<double> z = point_at(idx);
    const std::vector<double> v = vprime(z);
    for (double vi : v) {
      if (!std::isfinite(vi)) report.finite = false;
      report.max_v = std::max(report.max_v, std::fabs(vi));
    }
    std::vector<double> zp = z, zm = z;
    for (int j = 0; j < d; ++j) {
      zp[j] = z[j] + fd_step;
      zm[j] = z[j] - fd_step;
      const std::vector<double> vp = vprime(zp), vm = vprime(zm);
      for (int i = 0; i < d; ++i) {
        const double entry = (vp[i] - vm[i]) / (2.0 * fd_step);
        if (!std::isfinite(entry)) report.finite = false;
        report.max_jacobian = std::max(report.max_jacobian, std::fabs(entry));
      }
      zp[j] = z[j];
      zm[j] = z[j];
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Witness battery
// ---------------------------------------------------------------------------

namespace {

CheckResult check(const std::string& name, bool pass, const std::string& detail) {
  return CheckResult{name, pass, detail};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

std::vector<CheckResult> run_theory_checks(uint64_t seed) {
  std::vector<CheckResult> results;

  const Density1D std_normal = [](double x) { return normal_pdf(x, 0.0, 1.0); };
  const Density1D shifted = [](double x) { return normal_pdf(x, 1.5, 1.0); };
  const Density1D bimodal = [](double x) {
    return 0.5 * normal_pdf(x, -2.0, 0.5) + 0.5 * normal_pdf(x, 2.0, 0.5);
  };

  {
    Transport1D tr(std_normal, std_normal);
    double worst = 0.0;
    for (double x = -4.0; x <= 4.0; x += 0.05)
      worst = std::max(worst, std::fabs(tr.z_of_x(x) - x));
    results.push_back(check("transport-identity", worst < 1e-6, "max|z(x)-x|=" + fmt(worst)));
  }

  {
    Transport1D tr(std_normal, shifted);
    double worst = 0.0;
    for (double x = -4.0; x <= 4.0; x += 0.05)
      worst = std::max(worst, std::fabs(tr.z_of_x(x) - (x + 1.5)));
    results.push_back(
        check("transport-translation", worst < 1e-5, "max|z(x)-x-mu|=" + fmt(worst)));
  }

  double bimodal_residual = 0.0;
  {
    Transport1D tr(std_normal, bimodal);
    bool monotone = true;
    double prev = tr.z_of_x(-4.0);
    for (double x = -4.0; x <= 4.0; x += 0.01) {
      const double z = tr.z_of_x(x);
      if (x > -4.0 && z <= prev) monotone = false;
      prev = z;
      const double dz = tr.dz_dx(x);
      bimodal_residual =
          std::max(bimodal_residual, std::fabs(tr.p0(x) - tr.p1(z) * dz));
      if (dz <= 0.0) monotone = false;
    }
    results.push_back(check("transport-bimodal-residual", bimodal_residual < 1e-4,
                            "sup|p0 - p1(z) z'|=" + fmt(bimodal_residual)));
    results.push_back(check("transport-monotone", monotone, "z strictly increasing, z' > 0"));

    // Invertibility condition (1-xi) + xi z' > 0 for xi in [0, 1].
    bool invertible = true;
    for (double x = -4.0; x <= 4.0; x += 0.05) {
      const double dz = tr.dz_dx(x);
      for (double xi = 0.0; xi <= 1.0; xi += 0.125)
        if ((1.0 - xi) + xi * dz <= 0.0) invertible = false;
    }
    results.push_back(
        check("transport-invertibility", invertible, "(1-xi) + xi dz/dx stays positive"));

    // Endpoint behaviour of the constant-velocity interpolant.
    bool endpoints = true;
    for (double x : {-2.0, -0.5, 0.0, 0.7, 2.5}) {
      if (std::fabs(tr.straight_line_flow(x, 0.0, 0.0, 1.0) - x) > 1e-12) endpoints = false;
      if (std::fabs(tr.straight_line_flow(x, 1.0, 0.0, 1.0) - tr.z_of_x(x)) > 1e-12)
        endpoints = false;
    }
    results.push_back(check("straight-line-endpoints", endpoints, "s(x,t0)=x, s(x,t1)=z(x)"));

    // Pushforward of 100k samples against binned p1 mass.
    std::mt19937_64 rng = make_engine(seed, 0x7E0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int kSamples = 100000;
    const int kBins = 48;
    const double blo = -6.0, bhi = 6.0;
    std::vector<double> hist(kBins + 2, 0.0);
    for (int i = 0; i < kSamples; ++i) {
      const double z = tr.straight_line_flow(normal(rng), 1.0, 0.0, 1.0);
      int b;
      if (z < blo)
        b = 0;
      else if (z >= bhi)
        b = kBins + 1;
      else
        b = 1 + static_cast<int>((z - blo) / (bhi - blo) * kBins);
      hist[b] += 1.0 / kSamples;
    }
    double tv = 0.0;
    for (int b = 0; b < kBins + 2; ++b) {
      double mass;
      if (b == 0)
        mass = tr.cdf1(blo);
      else if (b == kBins + 1)
        mass = 1.0 - tr.cdf1(bhi);
      else {
        const double a = blo + (bhi - blo) * (b - 1) / kBins;
        const double bb = blo + (bhi - blo) * b / kBins;
        mass = tr.cdf1(bb) - tr.cdf1(a);
      }
      tv += std::fabs(hist[b] - mass);
    }
    tv *= 0.5;
    results.push_back(check("pushforward-tv", tv < 0.02, "TV=" + fmt(tv)));
  }

  // Box-field divergence witnesses.
  std::mt19937_64 rng = make_engine(seed, 0xB0);
  for (int d : {2, 3}) {
    BoxField field;
    field.L.assign(d, 1.0);
    field.c.assign(d, 0.0);
    field.c[0] = 1.0;
    field.c[d - 1] = -1.0;
    std::uniform_real_distribution<double> interior(-0.999, 0.999);
    double worst = 0.0;
    for (int k = 0; k < 10000; ++k) {
      std::vector<double> z(d);
      for (int i = 0; i < d; ++i) z[i] = interior(rng);
      worst = std::max(worst, std::fabs(box_field_divergence(field, z)));
    }
    results.push_back(check("box-divergence-free-" + std::to_string(d) + "d", worst < 1e-6,
                            "max|div u|=" + fmt(worst)));
  }

  {
    BoxField bad;
    bad.L = {1.0, 1.0};
    bad.c = {1.0, 1.0};  // violates sum c = 0 on purpose
    const double div = box_field_divergence(bad, {0.5, 0.5});
    results.push_back(check("box-divergence-violation-detected", std::fabs(div - 2.0) < 1e-5,
                            "div=" + fmt(div) + " (expect 2)"));
  }

  {
    // Continuity at the boundary: |c| <= 0.3 keeps the boundary-adjacent
    // magnitude (about 2*delta*|c|) inside the 1e-3 budget at spacing 1e-3.
    BoxField field;
    field.L = {1.0, 1.0};
    field.c = {0.3, -0.3};
    const double delta = 1e-3;
    double worst = 0.0;
    for (double s = -1.0 + delta; s <= 1.0 - delta + 1e-12; s += delta) {
      for (const std::vector<double>& z :
           {std::vector<double>{s, 1.0 - delta}, std::vector<double>{s, -1.0 + delta},
            std::vector<double>{1.0 - delta, s}, std::vector<double>{-1.0 + delta, s}}) {
        const std::vector<double> u = field.u(z);
        worst = std::max(worst, std::hypot(u[0], u[1]));
      }
    }
    const std::vector<double> outside = field.u({1.5, 0.2});
    const bool zero_outside = outside[0] == 0.0 && outside[1] == 0.0;
    results.push_back(check("box-boundary-continuity", worst < 1e-3 && zero_outside,
                            "max boundary-adjacent |u|=" + fmt(worst)));
  }

  {
    BoxField field;
    field.L = {1.0, 1.0};
    field.c = {1.0, -1.0};
    const DensityND gauss = [](const std::vector<double>& z) {
      double p = 1.0;
      for (double zi : z) p *= normal_pdf(zi, 0.0, 1.0);
      return p;
    };
    VariationReport rep = verify_variation_boundedness(field, gauss, 41);
    results.push_back(check("variation-bounded", rep.finite && rep.max_v < 1e6 &&
                                                     rep.max_jacobian < 1e8,
                            "max|v'|=" + fmt(rep.max_v) +
                                ", max|dv'/dz|=" + fmt(rep.max_jacobian)));

    BoxField smaller = field;
    smaller.L = {0.5, 0.5};
    VariationReport rep_small = verify_variation_boundedness(smaller, gauss, 41);
    results.push_back(check("box-shrink-monotone", rep_small.max_v <= rep.max_v,
                            fmt(rep_small.max_v) + " <= " + fmt(rep.max_v)));
  }

  return results;
}

}  // namespace cnftpr
