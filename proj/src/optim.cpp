#include "rain/optim.hpp"

#include <cmath>

namespace rain {

void Adam::step(std::span<Param* const> params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    if (!p->trainable) continue;
    Moments& s = state_[p->name];
    if (s.m.size() != p->size()) {
      s.m.assign(p->size(), 0.0);
      s.v.assign(p->size(), 0.0);
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i];
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g;
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p->value[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

double global_grad_norm(std::span<Param* const> params) {
  double sq = 0.0;
  for (const Param* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Param* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Param* p : params) {
      if (!p->trainable) continue;
      for (double& g : p->grad) g *= scale;
    }
  }
  return norm;
}

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

}  // namespace rain
