#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sdfa/tensor.hpp"

namespace sdfa {

/// A learnable array and its accumulated gradient, addressed by a
/// hierarchical name such as "backbone.encoder.0.conv1.weight".
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Index rows, Index cols)
      : name(std::move(n)), value(Matrix<Scalar>::Zero(rows, cols)), grad(Matrix<Scalar>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
void fill_normal(Matrix<Scalar>& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero "same" padding) lowered to im2col + GEMM.

template <typename Scalar>
class Conv2d {
 public:
  struct Cache {
    Matrix<Scalar> columns;
    Index height = 0;
    Index width = 0;
  };

  Conv2d() = default;
  Conv2d(const std::string& name, Index in_channels, Index out_channels, Index kernel)
      : in_channels_(in_channels),
        out_channels_(out_channels),
        kernel_(kernel),
        weight(name + ".weight", out_channels, in_channels * kernel * kernel),
        bias(name + ".bias", out_channels, 1) {
    if (kernel % 2 != 1) throw ConfigError("conv kernel must be odd");
  }

  /// He-normal weights, zero bias.
  void init(std::mt19937_64& rng) {
    fill_normal(weight.value, std::sqrt(2.0 / static_cast<double>(in_channels_ * kernel_ * kernel_)), rng);
    bias.value.setZero();
  }

  Index in_channels() const { return in_channels_; }
  Index out_channels() const { return out_channels_; }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Cache& cache) const {
    if (x.channels() != in_channels_) {
      throw ShapeError(weight.name + ": expected " + std::to_string(in_channels_) + " input channels, got " +
                       std::to_string(x.channels()));
    }
    cache.height = x.height;
    cache.width = x.width;
    im2col(x, cache.columns);
    FeatureMap<Scalar> y;
    y.height = x.height;
    y.width = x.width;
    y.values.noalias() = weight.value * cache.columns;
    y.values.colwise() += bias.value.col(0);
    return y;
  }

  FeatureMap<Scalar> backward(const Cache& cache, const FeatureMap<Scalar>& dy) {
    weight.grad.noalias() += dy.values * cache.columns.transpose();
    bias.grad.col(0) += dy.values.rowwise().sum();
    Matrix<Scalar> dcols = weight.value.transpose() * dy.values;
    FeatureMap<Scalar> dx(in_channels_, cache.height, cache.width);
    col2im(dcols, dx);
    return dx;
  }

  void collect(ParameterList<Scalar>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

 private:
  void im2col(const FeatureMap<Scalar>& x, Matrix<Scalar>& cols) const {
    const Index h = x.height, w = x.width, pad = kernel_ / 2;
    cols.setZero(in_channels_ * kernel_ * kernel_, h * w);
    for (Index c = 0; c < in_channels_; ++c) {
      const Scalar* src = x.values.row(c).data();
      for (Index ky = 0; ky < kernel_; ++ky) {
        for (Index kx = 0; kx < kernel_; ++kx) {
          Scalar* dst = cols.row((c * kernel_ + ky) * kernel_ + kx).data();
          const Index x0 = std::max<Index>(0, pad - kx);
          const Index x1 = std::min<Index>(w, w + pad - kx);
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            std::copy(src + sy * w + x0 + kx - pad, src + sy * w + x1 + kx - pad, dst + y * w + x0);
          }
        }
      }
    }
  }

  void col2im(const Matrix<Scalar>& cols, FeatureMap<Scalar>& dx) const {
    const Index h = dx.height, w = dx.width, pad = kernel_ / 2;
    for (Index c = 0; c < in_channels_; ++c) {
      Scalar* dst = dx.values.row(c).data();
      for (Index ky = 0; ky < kernel_; ++ky) {
        for (Index kx = 0; kx < kernel_; ++kx) {
          const Scalar* src = cols.row((c * kernel_ + ky) * kernel_ + kx).data();
          const Index x0 = std::max<Index>(0, pad - kx);
          const Index x1 = std::min<Index>(w, w + pad - kx);
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            Scalar* row = dst + sy * w + kx - pad;
            const Scalar* in = src + y * w;
            for (Index xx = x0; xx < x1; ++xx) row[xx] += in[xx];
          }
        }
      }
    }
  }

  Index in_channels_ = 0;
  Index out_channels_ = 0;
  Index kernel_ = 1;

 public:
  Parameter<Scalar> weight;
  Parameter<Scalar> bias;
};

// ---------------------------------------------------------------------------
// Instance normalization with per-channel affine.

template <typename Scalar>
class InstanceNorm {
 public:
  struct Cache {
    Matrix<Scalar> normalized;
    Vector<Scalar> inv_std;
  };

  static constexpr double kEpsilon = 1e-5;

  InstanceNorm() = default;
  InstanceNorm(const std::string& name, Index channels)
      : gamma(name + ".gamma", channels, 1), beta(name + ".beta", channels, 1) {
    gamma.value.setOnes();
  }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Cache& cache) const {
    const Vector<Scalar> mean = x.values.rowwise().mean();
    Matrix<Scalar> centered = x.values.colwise() - mean;
    const Vector<Scalar> var = centered.array().square().rowwise().mean().matrix();
    cache.inv_std = (var.array() + Scalar(kEpsilon)).rsqrt().matrix();
    cache.normalized = cache.inv_std.asDiagonal() * centered;
    FeatureMap<Scalar> y(gamma.value.col(0).asDiagonal() * cache.normalized, x.height, x.width);
    y.values.colwise() += beta.value.col(0);
    return y;
  }

  FeatureMap<Scalar> backward(const Cache& cache, const FeatureMap<Scalar>& dy) {
    const Index m = dy.pixels();
    gamma.grad.col(0) += dy.values.cwiseProduct(cache.normalized).rowwise().sum();
    beta.grad.col(0) += dy.values.rowwise().sum();
    const Matrix<Scalar> dnorm = gamma.value.col(0).asDiagonal() * dy.values;
    const Vector<Scalar> mean_d = dnorm.rowwise().sum() / Scalar(m);
    const Vector<Scalar> mean_dn = dnorm.cwiseProduct(cache.normalized).rowwise().sum() / Scalar(m);
    Matrix<Scalar> centered = dnorm.colwise() - mean_d;
    centered -= mean_dn.asDiagonal() * cache.normalized;
    return FeatureMap<Scalar>(cache.inv_std.asDiagonal() * centered, dy.height, dy.width);
  }

  void collect(ParameterList<Scalar>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;
};

// ---------------------------------------------------------------------------
// Parameter-free pieces.

template <typename Scalar>
FeatureMap<Scalar> relu(const FeatureMap<Scalar>& x) {
  return FeatureMap<Scalar>(x.values.cwiseMax(Scalar(0)), x.height, x.width);
}

/// Gradient of relu given its forward output.
template <typename Scalar>
FeatureMap<Scalar> relu_backward(const FeatureMap<Scalar>& output, const FeatureMap<Scalar>& dy) {
  return FeatureMap<Scalar>((output.values.array() > Scalar(0)).select(dy.values, Scalar(0)), dy.height, dy.width);
}

template <typename Scalar>
struct PoolCache {
  std::vector<Index> argmax;
  Index height = 0;
  Index width = 0;
};

/// 2×2 max pooling, stride 2. Ties resolve to the first element in scan order.
template <typename Scalar>
FeatureMap<Scalar> max_pool2(const FeatureMap<Scalar>& x, PoolCache<Scalar>& cache) {
  if (x.height % 2 != 0 || x.width % 2 != 0) {
    throw ShapeError("max_pool2: spatial dims must be even, got " + shape_string(x));
  }
  const Index oh = x.height / 2, ow = x.width / 2;
  FeatureMap<Scalar> y(x.channels(), oh, ow);
  cache.height = x.height;
  cache.width = x.width;
  cache.argmax.resize(static_cast<std::size_t>(x.channels() * oh * ow));
  for (Index c = 0; c < x.channels(); ++c) {
    const Scalar* src = x.values.row(c).data();
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Index best = (2 * oy) * x.width + 2 * ox;
        for (Index k : {best + 1, best + x.width, best + x.width + 1}) {
          if (src[k] > src[best]) best = k;
        }
        y.values(c, oy * ow + ox) = src[best];
        cache.argmax[static_cast<std::size_t>((c * oh + oy) * ow + ox)] = best;
      }
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> max_pool2_backward(const PoolCache<Scalar>& cache, const FeatureMap<Scalar>& dy) {
  FeatureMap<Scalar> dx(dy.channels(), cache.height, cache.width);
  const Index per_channel = dy.pixels();
  for (Index c = 0; c < dy.channels(); ++c) {
    for (Index i = 0; i < per_channel; ++i) {
      dx.values(c, cache.argmax[static_cast<std::size_t>(c * per_channel + i)]) += dy.values(c, i);
    }
  }
  return dx;
}

/// Nearest-neighbour 2× upsampling.
template <typename Scalar>
FeatureMap<Scalar> upsample2(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y(x.channels(), x.height * 2, x.width * 2);
  for (Index c = 0; c < x.channels(); ++c) {
    for (Index yy = 0; yy < y.height; ++yy) {
      for (Index xx = 0; xx < y.width; ++xx) y(c, yy, xx) = x(c, yy / 2, xx / 2);
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> upsample2_backward(const FeatureMap<Scalar>& dy) {
  FeatureMap<Scalar> dx(dy.channels(), dy.height / 2, dy.width / 2);
  for (Index c = 0; c < dy.channels(); ++c) {
    for (Index yy = 0; yy < dy.height; ++yy) {
      for (Index xx = 0; xx < dy.width; ++xx) dx(c, yy / 2, xx / 2) += dy(c, yy, xx);
    }
  }
  return dx;
}

/// Stacks channels of a on top of channels of b.
template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("concat: spatial mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  FeatureMap<Scalar> y(a.channels() + b.channels(), a.height, a.width);
  y.values.topRows(a.channels()) = a.values;
  y.values.bottomRows(b.channels()) = b.values;
  return y;
}

// ---------------------------------------------------------------------------
// Fully connected layer on a column vector.

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Index in, Index out) : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {}

  void init(std::mt19937_64& rng) {
    fill_normal(weight.value, std::sqrt(1.0 / static_cast<double>(weight.value.cols())), rng);
    bias.value.setZero();
  }

  Vector<Scalar> forward(const Vector<Scalar>& x) const { return weight.value * x + bias.value.col(0); }

  Vector<Scalar> backward(const Vector<Scalar>& x, const Vector<Scalar>& dy) {
    weight.grad.noalias() += dy * x.transpose();
    bias.grad.col(0) += dy;
    return weight.value.transpose() * dy;
  }

  void collect(ParameterList<Scalar>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;
};

// ---------------------------------------------------------------------------
// conv3×3 → IN → ReLU → conv3×3 → IN → ReLU

template <typename Scalar>
class ConvBlock {
 public:
  struct Cache {
    typename Conv2d<Scalar>::Cache conv1, conv2;
    typename InstanceNorm<Scalar>::Cache norm1, norm2;
    FeatureMap<Scalar> act1, act2;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, Index in, Index out)
      : conv1_(name + ".conv1", in, out, 3),
        norm1_(name + ".norm1", out),
        conv2_(name + ".conv2", out, out, 3),
        norm2_(name + ".norm2", out) {}

  void init(std::mt19937_64& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
  }

  Index out_channels() const { return conv2_.out_channels(); }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x, Cache& cache) const {
    cache.act1 = relu(norm1_.forward(conv1_.forward(x, cache.conv1), cache.norm1));
    cache.act2 = relu(norm2_.forward(conv2_.forward(cache.act1, cache.conv2), cache.norm2));
    return cache.act2;
  }

  FeatureMap<Scalar> backward(const Cache& cache, const FeatureMap<Scalar>& dy) {
    auto g = norm2_.backward(cache.norm2, relu_backward(cache.act2, dy));
    g = conv2_.backward(cache.conv2, g);
    g = norm1_.backward(cache.norm1, relu_backward(cache.act1, g));
    return conv1_.backward(cache.conv1, g);
  }

  void collect(ParameterList<Scalar>& out) {
    conv1_.collect(out);
    norm1_.collect(out);
    conv2_.collect(out);
    norm2_.collect(out);
  }

 private:
  Conv2d<Scalar> conv1_;
  InstanceNorm<Scalar> norm1_;
  Conv2d<Scalar> conv2_;
  InstanceNorm<Scalar> norm2_;
};

}  // namespace sdfa
