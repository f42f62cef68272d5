#pragma once

#include <vector>

#include "cnftpr/tape.hpp"

namespace cnftpr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction, updating leaf values in place.
class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig cfg);

  // Returns false (and leaves parameters untouched) when any gradient entry
  // is non-finite.
  bool step(Tape& tape, const GradMap& grads);

  long steps_taken() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace cnftpr
