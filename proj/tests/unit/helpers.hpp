#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "rain/datagen.hpp"
#include "rain/tensor.hpp"

namespace rain::test {

inline Image random_image(int h, int w, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (double& v : img.data) v = u(rng);
  return img;
}

inline Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor t(n, c, h, w);
  for (double& v : t.values()) v = g(rng);
  return t;
}

// max |a - b| / max(1e-8, |a| + |b|) style comparison used by the
// finite-difference checks
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
  return std::abs(analytic - numeric) / denom;
}

inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-6) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace rain::test

namespace rain::test {

// ||a - n|| / (||a|| + ||n||) over a whole gradient
inline double rel_error(std::span<const double> a, std::span<const double> n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
}

}  // namespace rain::test
