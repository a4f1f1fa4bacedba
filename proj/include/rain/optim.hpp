#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "rain/layers.hpp"

namespace rain {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment descent. Moments are keyed by parameter name so the state
/// can be checkpointed and restored independently of pointer identity.
class Adam {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  /// One update of every trainable parameter in `params`. Buffers are skipped.
  void step(std::span<Param* const> params);

  const AdamConfig& config() const noexcept { return config_; }
  long steps() const noexcept { return t_; }
  void set_steps(long t) noexcept { t_ = t; }
  std::map<std::string, Moments>& state() noexcept { return state_; }
  const std::map<std::string, Moments>& state() const noexcept { return state_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

double global_grad_norm(std::span<Param* const> params);
/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(std::span<Param* const> params, double max_norm);
void zero_grads(std::span<Param* const> params);

}  // namespace rain
