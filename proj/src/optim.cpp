#include "cnftpr/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cnftpr {

Adam::Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Var& p : params_) {
    m_.emplace_back(Tensor::zeros(p.rows(), p.cols()));
    v_.emplace_back(Tensor::zeros(p.rows(), p.cols()));
  }
}

bool Adam::step(Tape& tape, const GradMap& grads) {
  for (const Var& p : params_) {
    auto it = grads.find(p.id);
    if (it == grads.end()) throw std::invalid_argument("Adam::step: missing gradient");
    if (!it->second.all_finite()) return false;
    if (!it->second.same_shape(p.value()))
      throw std::invalid_argument("Adam::step: gradient shape mismatch");
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (size_t k = 0; k < params_.size(); ++k) {
    const Tensor& g = grads.at(params_[k].id);
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    Tensor& w = tape.mutable_value(params_[k]);
    for (int i = 0; i < g.size(); ++i) {
      m.d[i] = cfg_.beta1 * m.d[i] + (1.0 - cfg_.beta1) * g.d[i];
      v.d[i] = cfg_.beta2 * v.d[i] + (1.0 - cfg_.beta2) * g.d[i] * g.d[i];
      const double mhat = m.d[i] / bc1;
      const double vhat = v.d[i] / bc2;
      w.d[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  return true;
}

}  // namespace cnftpr
