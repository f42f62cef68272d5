#include "cnftpr/data.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <stdexcept>

#include "cnftpr/rng.hpp"

namespace cnftpr {

namespace {

constexpr double kPi = 3.14159265358979323846;

Tensor raw_rings(int count, std::mt19937_64& rng) {
  static const double radii[4] = {0.25, 0.5, 0.75, 1.0};
  std::uniform_int_distribution<int> ring(0, 3);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * kPi);
  std::normal_distribution<double> radial_noise(0.0, 0.02);
  Tensor out(count, 2);
  for (int i = 0; i < count; ++i) {
    const double r = radii[ring(rng)] + radial_noise(rng);
    const double a = angle(rng);
    out.at(i, 0) = r * std::cos(a);
    out.at(i, 1) = r * std::sin(a);
  }
  return out;
}

Tensor raw_pinwheel(int count, std::mt19937_64& rng) {
  constexpr int kArms = 5;
  constexpr double kRadialStd = 0.3;
  constexpr double kTangentialStd = 0.05;
  constexpr double kRate = 0.25;
  std::uniform_int_distribution<int> arm(0, kArms - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(count, 2);
  for (int i = 0; i < count; ++i) {
    const double f0 = 1.0 + kRadialStd * normal(rng);
    const double f1 = kTangentialStd * normal(rng);
    const double theta = 2.0 * kPi * arm(rng) / kArms + kRate * std::exp(f0);
    out.at(i, 0) = f0 * std::cos(theta) - f1 * std::sin(theta);
    out.at(i, 1) = f0 * std::sin(theta) + f1 * std::cos(theta);
  }
  return out;
}

Tensor raw_moons(int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> half(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, kPi);
  std::normal_distribution<double> noise(0.0, 0.1);
  Tensor out(count, 2);
  for (int i = 0; i < count; ++i) {
    const double a = angle(rng);
    double x, y;
    if (half(rng) < 0.5) {
      x = std::cos(a);
      y = std::sin(a);
    } else {
      x = 1.0 - std::cos(a);
      y = 0.5 - std::sin(a);
    }
    out.at(i, 0) = x + noise(rng);
    out.at(i, 1) = y + noise(rng);
  }
  return out;
}

struct Standardizer {
  double mean[2] = {0, 0};
  double std[2] = {1, 1};
};

// Reference statistics from a large fixed-seed draw, shared by every caller
// so train and test batches live in one frame.
const Standardizer& standardizer_for(const std::string& name) {
  static std::map<std::string, Standardizer> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(name);
  if (it != cache.end()) return it->second;

  std::mt19937_64 rng = make_engine(0xD47A5EEDULL, std::hash<std::string>{}(name));
  Tensor ref = generate_raw(name, 200000, rng);
  Standardizer s;
  for (int j = 0; j < 2; ++j) {
    double m = 0.0;
    for (int i = 0; i < ref.rows; ++i) m += ref.at(i, j);
    m /= ref.rows;
    double v = 0.0;
    for (int i = 0; i < ref.rows; ++i) {
      const double d = ref.at(i, j) - m;
      v += d * d;
    }
    s.mean[j] = m;
    s.std[j] = std::sqrt(v / ref.rows);
  }
  return cache.emplace(name, s).first->second;
}

void standardize(Tensor& pts, const Standardizer& s) {
  for (int i = 0; i < pts.rows; ++i)
    for (int j = 0; j < 2; ++j) pts.at(i, j) = (pts.at(i, j) - s.mean[j]) / s.std[j];
}

}  // namespace

bool is_known_dataset(const std::string& name) {
  return name == "rings" || name == "pinwheel" || name == "moons";
}

Tensor generate_raw(const std::string& name, int count, std::mt19937_64& rng) {
  if (count <= 0) throw std::invalid_argument("generate: count must be positive");
  if (name == "rings") return raw_rings(count, rng);
  if (name == "pinwheel") return raw_pinwheel(count, rng);
  if (name == "moons") return raw_moons(count, rng);
  throw std::invalid_argument("generate: unknown dataset '" + name + "'");
}

Dataset2D generate(const std::string& name, int count, uint64_t seed) {
  std::mt19937_64 rng = make_engine(seed, 0xDA7A);
  Dataset2D ds;
  ds.name = name;
  ds.seed = seed;
  ds.points = generate_raw(name, count, rng);
  standardize(ds.points, standardizer_for(name));
  return ds;
}

DataStream::DataStream(std::string name, uint64_t seed)
    : name_(std::move(name)), rng_(make_engine(seed, 0x57EA)) {
  if (!is_known_dataset(name_))
    throw std::invalid_argument("DataStream: unknown dataset '" + name_ + "'");
}

Tensor DataStream::next(int batch) {
  Tensor pts = generate_raw(name_, batch, rng_);
  standardize(pts, standardizer_for(name_));
  return pts;
}

Split make_split(int pool, double train_frac, double val_frac) {
  if (pool <= 0 || train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0)
    throw std::invalid_argument("make_split: bad fractions");
  Split s;
  s.train_begin = 0;
  s.train_end = static_cast<int>(pool * train_frac);
  s.val_begin = s.train_end;
  s.val_end = s.val_begin + static_cast<int>(pool * val_frac);
  s.test_begin = s.val_end;
  s.test_end = pool;
  return s;
}

void export_csv(const std::string& path, const Tensor& points) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("export_csv: cannot open " + path);
  std::fprintf(f, "x0,x1\n");
  for (int i = 0; i < points.rows; ++i)
    std::fprintf(f, "%.12g,%.12g\n", points.at(i, 0), points.at(i, 1));
  std::fclose(f);
}

}  // namespace cnftpr
