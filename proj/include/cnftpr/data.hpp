#pragma once

#include <random>
#include <string>

#include "cnftpr/tensor.hpp"

namespace cnftpr {

// Seeded generators for the three 2D toy densities: rings, pinwheel, moons.
// Samples are standardized per dimension against fixed reference statistics,
// so the same name always maps to the same affine frame.

struct Dataset2D {
  std::string name;
  Tensor points;  // N x 2
  uint64_t seed = 0;
};

bool is_known_dataset(const std::string& name);

Dataset2D generate(const std::string& name, int count, uint64_t seed);

// Unstandardized draws; exposed for the generator shape tests.
Tensor generate_raw(const std::string& name, int count, std::mt19937_64& rng);

// Endless standardized batches for training.
class DataStream {
 public:
  DataStream(std::string name, uint64_t seed);
  Tensor next(int batch);

 private:
  std::string name_;
  std::mt19937_64 rng_;
};

// Index split of a generated pool into disjoint train/val/test ranges.
struct Split {
  int train_begin = 0, train_end = 0;
  int val_begin = 0, val_end = 0;
  int test_begin = 0, test_end = 0;
};
Split make_split(int pool, double train_frac, double val_frac);

void export_csv(const std::string& path, const Tensor& points);

}  // namespace cnftpr
