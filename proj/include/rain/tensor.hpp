#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rain {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
// Storage for anything handed to Eigen through a Map. A fixed base alignment
// keeps vectorised reductions in the same order regardless of heap layout.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense NCHW batch of feature maps.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0)
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const noexcept { return n_; }
  int c() const noexcept { return c_; }
  int h() const noexcept { return h_; }
  int w() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c_) * h_ * w_; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  double* sample(int i) noexcept { return data_.data() + i * sample_size(); }
  const double* sample(int i) const noexcept { return data_.data() + i * sample_size(); }
  AlignedVector& values() noexcept { return data_; }
  const AlignedVector& values() const noexcept { return data_; }

  double& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }
  double at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }

  bool same_shape(const Tensor& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_string() const;

  Tensor& operator+=(const Tensor& o);
  bool operator==(const Tensor& o) const = default;

  /// Rows [begin, begin + count) of the batch.
  Tensor slice(int begin, int count) const;
  static Tensor concat(const Tensor& a, const Tensor& b);

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  AlignedVector data_;
};

}  // namespace rain
