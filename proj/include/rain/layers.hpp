#pragma once

#include <string>
#include <vector>

#include "rain/common.hpp"
#include "rain/tensor.hpp"

namespace rain {

/// Named array of reals. Buffers (trainable == false) hold running
/// statistics; they are checkpointed but never touched by an optimizer.
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector value;
  AlignedVector grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<int> s, double fill = 0.0, bool train = true);
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad();
};

/// What a backward pass should produce.
struct GradMode {
  bool params = true;
  bool input = true;
};

// Layers keep the activations they need for backward() only when run through
// forward(); infer() is const and cache-free so snapshots can be evaluated
// concurrently.

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad);

  Tensor forward(const Tensor& x);
  Tensor infer(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out, GradMode mode = {});

  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
  int out_extent(int in) const noexcept { return (in + 2 * pad_ - kernel_) / stride_ + 1; }
  int in_channels() const noexcept { return in_ch_; }
  int out_channels() const noexcept { return out_ch_; }

 private:
  Tensor run(const Tensor& x, AlignedVector* cols) const;

  int in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  Param weight_, bias_;
  int cached_n_ = 0, cached_h_ = 0, cached_w_ = 0;
  AlignedVector cols_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x);  // batch statistics, updates running stats
  Tensor infer(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out, GradMode mode = {});

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

 private:
  int channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Param gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

/// ReLU (slope 0) or leaky ReLU.
class Activation {
 public:
  explicit Activation(double negative_slope = 0.0) : slope_(negative_slope) {}
  Tensor forward(const Tensor& x);
  Tensor infer(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out) const;

 private:
  double slope_;
  Tensor input_;
};

/// Nearest-neighbour x2 spatial up-sampling.
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& grad_out);

/// Global average pooling: N x C x H x W -> N x C.
Matrix global_average_pool(const Tensor& x);
Tensor global_average_pool_backward(const Matrix& grad, int h, int w);

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features);

  Matrix forward(const Matrix& x);
  Matrix infer(const Matrix& x) const;
  Matrix backward(const Matrix& grad_out, GradMode mode = {});

  void init(Rng& rng);
  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
  int in_features() const noexcept { return in_; }
  int out_features() const noexcept { return out_; }

 private:
  int in_ = 0, out_ = 0;
  Param weight_, bias_;
  Matrix input_;
};

}  // namespace rain
