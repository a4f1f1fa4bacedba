#include "rain/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rain {

// ---------------------------------------------------------------- Tensor

std::string Tensor::shape_string() const {
  return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) + "," +
         std::to_string(w_) + "]";
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (!same_shape(o)) throw std::invalid_argument("tensor shape mismatch " + shape_string() + " vs " + o.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor Tensor::slice(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > n_) throw std::out_of_range("tensor slice out of range");
  Tensor out(count, c_, h_, w_);
  std::copy(sample(begin), sample(begin) + count * sample_size(), out.data());
  return out;
}

Tensor Tensor::concat(const Tensor& a, const Tensor& b) {
  if (a.c_ != b.c_ || a.h_ != b.h_ || a.w_ != b.w_) throw std::invalid_argument("concat: shape mismatch");
  Tensor out(a.n_ + b.n_, a.c_, a.h_, a.w_);
  std::copy(a.data_.begin(), a.data_.end(), out.data_.begin());
  std::copy(b.data_.begin(), b.data_.end(), out.data_.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// ---------------------------------------------------------------- Param

Param::Param(std::string n, std::vector<int> s, double fill, bool train)
    : name(std::move(n)), shape(std::move(s)), trainable(train) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, fill);
  grad.assign(count, 0.0);
}

void Param::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// ---------------------------------------------------------------- Conv2d

namespace {

using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;

// Column layout: row r = (c, ky, kx) with stride `ld`; the sample's output
// positions occupy `plane` consecutive entries of each row.
void im2col(const double* img, int channels, int h, int w, int k, int stride, int pad, int oh, int ow,
            double* cols, std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * ld;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= h) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(c) * h + y) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox * stride - pad + kx;
            row[oy * ow + ox] = (x >= 0 && x < w) ? src[x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t ld, int channels, int h, int w, int k, int stride, int pad, int oh,
            int ow, double* img) {
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * ld;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= h) continue;
          double* dst = img + (static_cast<std::size_t>(c) * h + y) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox * stride - pad + kx;
            if (x >= 0 && x < w) dst[x] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}),
      bias_(name + ".bias", {out_ch}) {}

void Conv2d::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_ch_) * kernel_ * kernel_;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : weight_.value) v = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

void Conv2d::collect(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Conv2d::collect(std::vector<const Param*>& out) const {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Tensor Conv2d::run(const Tensor& x, AlignedVector* cols_out) const {
  if (x.c() != in_ch_) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_ch_) +
                                " input channels, got " + x.shape_string());
  }
  const int oh = out_extent(x.h());
  const int ow = out_extent(x.w());
  const int kdim = in_ch_ * kernel_ * kernel_;
  const int plane = oh * ow;
  const std::size_t ld = static_cast<std::size_t>(x.n()) * plane;
  Tensor out(x.n(), out_ch_, oh, ow);
  AlignedVector local;
  AlignedVector& cols = cols_out ? *cols_out : local;
  cols.resize(static_cast<std::size_t>(kdim) * ld);
  for (int n = 0; n < x.n(); ++n)
    im2col(x.sample(n), in_ch_, x.h(), x.w(), kernel_, stride_, pad_, oh, ow, cols.data() + n * plane, ld);

  // one GEMM over the whole batch
  ConstMatMap w(weight_.value.data(), out_ch_, kdim);
  Matrix y = w * ConstMatMap(cols.data(), kdim, static_cast<Eigen::Index>(ld));
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < out_ch_; ++c) {
      const double* src = y.data() + c * ld + static_cast<std::size_t>(n) * plane;
      double* dst = out.sample(n) + static_cast<std::size_t>(c) * plane;
      const double bc = bias_.value[c];
      for (int p = 0; p < plane; ++p) dst[p] = src[p] + bc;
    }
  }
  return out;
}

Tensor Conv2d::forward(const Tensor& x) {
  cached_n_ = x.n();
  cached_h_ = x.h();
  cached_w_ = x.w();
  return run(x, &cols_);
}

Tensor Conv2d::infer(const Tensor& x) const { return run(x, nullptr); }

Tensor Conv2d::backward(const Tensor& grad_out, GradMode mode) {
  const int oh = out_extent(cached_h_);
  const int ow = out_extent(cached_w_);
  if (grad_out.n() != cached_n_ || grad_out.c() != out_ch_ || grad_out.h() != oh || grad_out.w() != ow) {
    throw std::invalid_argument(weight_.name + ": backward gradient shape mismatch");
  }
  const int kdim = in_ch_ * kernel_ * kernel_;
  const int plane = oh * ow;
  const std::size_t ld = static_cast<std::size_t>(cached_n_) * plane;
  Tensor grad_in;
  if (mode.input) grad_in = Tensor(cached_n_, in_ch_, cached_h_, cached_w_);

  Matrix g(out_ch_, static_cast<Eigen::Index>(ld));
  for (int n = 0; n < cached_n_; ++n) {
    for (int c = 0; c < out_ch_; ++c) {
      const double* src = grad_out.sample(n) + static_cast<std::size_t>(c) * plane;
      std::copy(src, src + plane, g.data() + c * ld + static_cast<std::size_t>(n) * plane);
    }
  }
  if (mode.params) {
    MatMap dw(weight_.grad.data(), out_ch_, kdim);
    Eigen::Map<Vector> db(bias_.grad.data(), out_ch_);
    dw.noalias() += g * ConstMatMap(cols_.data(), kdim, static_cast<Eigen::Index>(ld)).transpose();
    db += g.rowwise().sum();
  }
  if (mode.input) {
    ConstMatMap w(weight_.value.data(), out_ch_, kdim);
    const Matrix dcols = w.transpose() * g;
    for (int n = 0; n < cached_n_; ++n) {
      col2im(dcols.data() + static_cast<std::size_t>(n) * plane, ld, in_ch_, cached_h_, cached_w_, kernel_, stride_,
             pad_, oh, ow, grad_in.sample(n));
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(const std::string& name, int channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name + ".gamma", {channels}, 1.0),
      beta_(name + ".beta", {channels}, 0.0),
      running_mean_(name + ".running_mean", {channels}, 0.0, false),
      running_var_(name + ".running_var", {channels}, 1.0, false) {}

void BatchNorm2d::collect(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

void BatchNorm2d::collect(std::vector<const Param*>& out) const {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  if (x.c() != channels_) throw std::invalid_argument(gamma_.name + ": channel mismatch");
  const int plane = x.h() * x.w();
  const double count = static_cast<double>(x.n()) * plane;
  Tensor out(x.n(), x.c(), x.h(), x.w());
  xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
  inv_std_.assign(channels_, 0.0);
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    const double var = sq / count;
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.sample(n) + static_cast<std::size_t>(c) * plane;
      double* xh = xhat_.sample(n) + static_cast<std::size_t>(c) * plane;
      double* o = out.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean) * inv;
        o[i] = gamma_.value[c] * xh[i] + beta_.value[c];
      }
    }
    const double unbiased = count > 1 ? sq / (count - 1.0) : var;
    running_mean_.value[c] = (1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean;
    running_var_.value[c] = (1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased;
  }
  return out;
}

Tensor BatchNorm2d::infer(const Tensor& x) const {
  if (x.c() != channels_) throw std::invalid_argument(gamma_.name + ": channel mismatch");
  const int plane = x.h() * x.w();
  Tensor out(x.n(), x.c(), x.h(), x.w());
  for (int c = 0; c < channels_; ++c) {
    const double inv = 1.0 / std::sqrt(running_var_.value[c] + eps_);
    const double scale = gamma_.value[c] * inv;
    const double shift = beta_.value[c] - running_mean_.value[c] * scale;
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.sample(n) + static_cast<std::size_t>(c) * plane;
      double* o = out.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) o[i] = p[i] * scale + shift;
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, GradMode mode) {
  if (!grad_out.same_shape(xhat_)) throw std::invalid_argument(gamma_.name + ": backward shape mismatch");
  const int plane = grad_out.h() * grad_out.w();
  const double count = static_cast<double>(grad_out.n()) * plane;
  Tensor grad_in;
  if (mode.input) grad_in = Tensor(grad_out.n(), grad_out.c(), grad_out.h(), grad_out.w());
  for (int c = 0; c < channels_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int n = 0; n < grad_out.n(); ++n) {
      const double* g = grad_out.sample(n) + static_cast<std::size_t>(c) * plane;
      const double* xh = xhat_.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xh[i];
      }
    }
    if (mode.params) {
      gamma_.grad[c] += sum_gx;
      beta_.grad[c] += sum_g;
    }
    if (!mode.input) continue;
    const double k = gamma_.value[c] * inv_std_[c] / count;
    for (int n = 0; n < grad_out.n(); ++n) {
      const double* g = grad_out.sample(n) + static_cast<std::size_t>(c) * plane;
      const double* xh = xhat_.sample(n) + static_cast<std::size_t>(c) * plane;
      double* d = grad_in.sample(n) + static_cast<std::size_t>(c) * plane;
      for (int i = 0; i < plane; ++i) d[i] = k * (count * g[i] - sum_g - xh[i] * sum_gx);
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------- Activation

Tensor Activation::forward(const Tensor& x) {
  input_ = x;
  return infer(x);
}

Tensor Activation::infer(const Tensor& x) const {
  Tensor out = x;
  for (double& v : out.values())
    if (v < 0.0) v *= slope_;
  return out;
}

Tensor Activation::backward(const Tensor& grad_out) const {
  if (!grad_out.same_shape(input_)) throw std::invalid_argument("activation: backward shape mismatch");
  Tensor grad = grad_out;
  const auto& in = input_.values();
  auto& g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (in[i] <= 0.0) g[i] *= slope_;
  return grad;
}

// ---------------------------------------------------------------- pooling / resampling

Tensor upsample2x(const Tensor& x) {
  Tensor out(x.n(), x.c(), x.h() * 2, x.w() * 2);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < out.h(); ++y)
        for (int xx = 0; xx < out.w(); ++xx) out.at(n, c, y, xx) = x.at(n, c, y / 2, xx / 2);
  return out;
}

Tensor upsample2x_backward(const Tensor& grad_out) {
  Tensor grad(grad_out.n(), grad_out.c(), grad_out.h() / 2, grad_out.w() / 2);
  for (int n = 0; n < grad_out.n(); ++n)
    for (int c = 0; c < grad_out.c(); ++c)
      for (int y = 0; y < grad_out.h(); ++y)
        for (int x = 0; x < grad_out.w(); ++x) grad.at(n, c, y / 2, x / 2) += grad_out.at(n, c, y, x);
  return grad;
}

Matrix global_average_pool(const Tensor& x) {
  Matrix out(x.n(), x.c());
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* p = x.sample(n) + static_cast<std::size_t>(c) * plane;
      double sum = 0.0;
      for (int i = 0; i < plane; ++i) sum += p[i];
      out(n, c) = sum / plane;
    }
  }
  return out;
}

Tensor global_average_pool_backward(const Matrix& grad, int h, int w) {
  Tensor out(static_cast<int>(grad.rows()), static_cast<int>(grad.cols()), h, w);
  const int plane = h * w;
  for (int n = 0; n < out.n(); ++n) {
    for (int c = 0; c < out.c(); ++c) {
      const double g = grad(n, c) / plane;
      double* p = out.sample(n) + static_cast<std::size_t>(c) * plane;
      std::fill(p, p + plane, g);
    }
  }
  return out;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, int in_features, int out_features)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", {out_features, in_features}),
      bias_(name + ".bias", {out_features}) {}

void Linear::init(Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in_));
  for (double& v : weight_.value) v = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

void Linear::collect(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Linear::collect(std::vector<const Param*>& out) const {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Matrix Linear::infer(const Matrix& x) const {
  if (x.cols() != in_) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) + " features, got " +
                                std::to_string(x.cols()));
  }
  ConstMatMap w(weight_.value.data(), out_, in_);
  Eigen::Map<const Eigen::RowVectorXd> b(bias_.value.data(), out_);
  Matrix y = x * w.transpose();
  y.rowwise() += b;
  return y;
}

Matrix Linear::forward(const Matrix& x) {
  input_ = x;
  return infer(x);
}

Matrix Linear::backward(const Matrix& grad_out, GradMode mode) {
  ConstMatMap w(weight_.value.data(), out_, in_);
  if (mode.params) {
    MatMap dw(weight_.grad.data(), out_, in_);
    Eigen::Map<Eigen::RowVectorXd> db(bias_.grad.data(), out_);
    dw.noalias() += grad_out.transpose() * input_;
    db += grad_out.colwise().sum();
  }
  if (!mode.input) return {};
  return grad_out * w;
}

}  // namespace rain
