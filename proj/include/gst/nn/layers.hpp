#pragma once

// Layers with explicit forward/backward. Each layer caches what its backward
// pass needs from the most recent training-mode forward call.

#include "gst/nn/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace gst::nn {

/// y = x Wᵀ (+ b) on row-stacked inputs.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias = false)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}) {
    if (bias) bias_ = Param<T>(name + ".bias", {out}, false);
    has_bias_ = bias;
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param<T>& weight() { return weight_; }

  void init(std::mt19937_64& rng, double stddev) {
    fill_normal(weight_, rng, stddev);
    if (has_bias_) std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  void collect(ParamList<T>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  Matrix<T> forward(const Matrix<T>& x, bool train) {
    if (train) input_ = x;
    return apply(x);
  }

  Matrix<T> apply(const Matrix<T>& x) const {
    Matrix<T> y = x * weight_.mat().transpose();
    if (has_bias_) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias_.value.data(), out_);
      y.rowwise() += b;
    }
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    weight_.grad_mat().noalias() += dy.transpose() * input_;
    if (has_bias_) {
      for (Eigen::Index j = 0; j < dy.cols(); ++j) bias_.grad[std::size_t(j)] += dy.col(j).sum();
    }
    return dy * weight_.mat();
  }

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_;
  Param<T> bias_;
  bool has_bias_ = false;
  Matrix<T> input_;
};

/// Square-kernel 2D convolution with zero padding k/2, via im2col.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride)
      : in_(in), out_(out), k_(kernel), stride_(stride), pad_(kernel / 2),
        weight_(name + ".weight", {out, in * kernel * kernel}),
        bias_(name + ".bias", {out}, false) {}

  void init(std::mt19937_64& rng, double gain = 1.0) {
    // He-style fan-in scaling
    fill_normal(weight_, rng, gain * std::sqrt(1.0 / double(in_ * k_ * k_)));
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  void collect(ParamList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  int out_size(int s) const { return (s + 2 * pad_ - k_) / stride_ + 1; }

  Tensor4<T> forward(const Tensor4<T>& x, bool train) {
    const int ho = out_size(x.h), wo = out_size(x.w);
    const Eigen::Index rows = Eigen::Index(in_) * k_ * k_, cols = Eigen::Index(ho) * wo;
    Tensor4<T> y(x.n, out_, ho, wo);
    if (train) {
      in_shape_ = {x.n, x.c, x.h, x.w};
      cols_.assign(std::size_t(x.n), Matrix<T>());
    }
    Matrix<T> col(rows, cols);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
    for (int i = 0; i < x.n; ++i) {
      im2col(x.sample(i), x.h, x.w, ho, wo, col);
      MatrixMap<T> out(y.sample(i), out_, cols);
      out.noalias() = weight_.mat() * col;
      out.colwise() += b;
      if (train) cols_[std::size_t(i)] = col;
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    const auto [n, c, h, w] = in_shape_;
    Tensor4<T> dx(n, c, h, w);
    const Eigen::Index cols = Eigen::Index(dy.h) * dy.w;
    Matrix<T> dcol;
    for (int i = 0; i < n; ++i) {
      ConstMatrixMap<T> g(dy.sample(i), out_, cols);
      weight_.grad_mat().noalias() += g * cols_[std::size_t(i)].transpose();
      for (int o = 0; o < out_; ++o) bias_.grad[std::size_t(o)] += g.row(o).sum();
      dcol.noalias() = weight_.mat().transpose() * g;
      col2im(dcol, h, w, dy.h, dy.w, dx.sample(i));
    }
    return dx;
  }

 private:
  void im2col(const T* src, int h, int w, int ho, int wo, Matrix<T>& col) const {
    for (int ch = 0; ch < in_; ++ch) {
      const T* plane = src + std::size_t(ch) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = col.data() + ((Eigen::Index(ch) * k_ + ky) * k_ + kx) * col.cols();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const Matrix<T>& col, int h, int w, int ho, int wo, T* dst) const {
    for (int ch = 0; ch < in_; ++ch) {
      T* plane = dst + std::size_t(ch) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = col.data() + ((Eigen::Index(ch) * k_ + ky) * k_ + kx) * col.cols();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              if (ix >= 0 && ix < w) plane[iy * w + ix] += row[oy * wo + ox];
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_;
  Param<T> bias_;
  std::array<int, 4> in_shape_{};
  std::vector<Matrix<T>> cols_;
};

template <typename T>
inline T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
class SiLU {
 public:
  Tensor4<T> forward(const Tensor4<T>& x, bool train) {
    if (train) input_ = x;
    Tensor4<T> y = x;
    for (auto& v : y.data) v = silu(v);
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& dy) const {
    Tensor4<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= silu_grad(input_.data[i]);
    return dx;
  }

 private:
  Tensor4<T> input_;
};

/// Nearest-neighbour ×2 upsampling.
template <typename T>
Tensor4<T> upsample2x(const Tensor4<T>& x) {
  Tensor4<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) y.at(i, ch, yy, xx) = x.at(i, ch, yy / 2, xx / 2);
  return y;
}

template <typename T>
Tensor4<T> upsample2x_backward(const Tensor4<T>& dy) {
  Tensor4<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int i = 0; i < dy.n; ++i)
    for (int ch = 0; ch < dy.c; ++ch)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) dx.at(i, ch, yy / 2, xx / 2) += dy.at(i, ch, yy, xx);
  return dx;
}

/// x + conv(silu(conv(silu(x)))), channel count preserved.
template <typename T>
class ResidualUnit {
 public:
  ResidualUnit() = default;
  ResidualUnit(const std::string& name, int channels)
      : conv1_(name + ".conv1", channels, channels, 3, 1), conv2_(name + ".conv2", channels, channels, 3, 1) {}

  void init(std::mt19937_64& rng) {
    conv1_.init(rng, std::sqrt(2.0));
    conv2_.init(rng, 0.1);
  }

  void collect(ParamList<T>& out) {
    conv1_.collect(out);
    conv2_.collect(out);
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool train) {
    Tensor4<T> h = conv2_.forward(act2_.forward(conv1_.forward(act1_.forward(x, train), train), train), train);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += x.data[i];
    return h;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dx = act1_.backward(conv1_.backward(act2_.backward(conv2_.backward(dy))));
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy.data[i];
    return dx;
  }

 private:
  SiLU<T> act1_, act2_;
  Conv2d<T> conv1_, conv2_;
};

/// Row-wise RMSNorm with a learned gain.
template <typename T>
class RMSNorm {
 public:
  RMSNorm() = default;
  RMSNorm(const std::string& name, int dim, double eps = 1e-6)
      : dim_(dim), eps_(eps), gain_(name + ".gain", {dim}, false) {
    std::fill(gain_.value.begin(), gain_.value.end(), T(1));
  }

  void collect(ParamList<T>& out) { out.push_back(&gain_); }

  Matrix<T> forward(const Matrix<T>& x, bool train) {
    Matrix<T> y(x.rows(), x.cols());
    if (train) {
      input_ = x;
      inv_rms_.resize(x.rows());
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const T inv = T(1) / std::sqrt(x.row(r).squaredNorm() / T(dim_) + T(eps_));
      if (train) inv_rms_[std::size_t(r)] = inv;
      for (int j = 0; j < dim_; ++j) y(r, j) = x(r, j) * inv * gain_.value[std::size_t(j)];
    }
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    Matrix<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const T inv = inv_rms_[std::size_t(r)];
      T dot = 0;
      for (int j = 0; j < dim_; ++j) {
        const T g = dy(r, j) * gain_.value[std::size_t(j)];
        gain_.grad[std::size_t(j)] += dy(r, j) * input_(r, j) * inv;
        dot += g * input_(r, j);
      }
      const T coef = dot * inv * inv * inv / T(dim_);
      for (int j = 0; j < dim_; ++j)
        dx(r, j) = dy(r, j) * gain_.value[std::size_t(j)] * inv - input_(r, j) * coef;
    }
    return dx;
  }

 private:
  int dim_ = 0;
  double eps_ = 1e-6;
  Param<T> gain_;
  Matrix<T> input_;
  std::vector<T> inv_rms_;
};

}  // namespace gst::nn
