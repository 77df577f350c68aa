#pragma once

#include <algorithm>
#include <random>
#include <string>

#include "sdfa/layers.hpp"
#include "sdfa/tensor.hpp"

namespace sdfa {

/// Channel selection produced by the direction selector. `hard` is the binary
/// vector used in the forward computation; `soft` carries the gradient.
template <typename Scalar>
struct DirectionOutput {
  Vector<Scalar> soft;
  Vector<Scalar> hard;
};

/// Strict threshold: soft exactly 0.5 maps to 0.
template <typename Scalar>
Vector<Scalar> threshold_direction(const Vector<Scalar>& soft) {
  return (soft.array() > Scalar(0.5)).template cast<Scalar>().matrix();
}

template <typename Scalar>
DirectionOutput<Scalar> direction_from_logits(const Vector<Scalar>& logits) {
  DirectionOutput<Scalar> out;
  out.soft = (Scalar(1) / (Scalar(1) + (-logits.array()).exp())).matrix();
  out.hard = threshold_direction(out.soft);
  return out;
}

/// Learnable map z ↦ d: conv3×3 → ReLU → conv3×3 → ReLU → global average
/// pool → fully connected → sigmoid → threshold. Backward is straight-through:
/// the gradient arriving at the hard vector is routed into the sigmoid.
template <typename Scalar>
class DirectionSelector {
 public:
  struct Cache {
    typename Conv2d<Scalar>::Cache conv1, conv2;
    FeatureMap<Scalar> act1, act2;
    Vector<Scalar> pooled;
    Vector<Scalar> soft;
  };

  DirectionSelector() = default;
  explicit DirectionSelector(Index channels, const std::string& name = "selector")
      : channels_(channels),
        conv1_(name + ".conv1", channels, hidden_width(channels), 3),
        conv2_(name + ".conv2", hidden_width(channels), hidden_width(channels), 3),
        fc_(name + ".fc", hidden_width(channels), channels) {}

  static Index hidden_width(Index channels) { return std::max<Index>(channels / 4, 4); }

  void init(std::mt19937_64& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    fc_.init(rng);
  }

  Index channels() const { return channels_; }

  DirectionOutput<Scalar> forward(const FeatureMap<Scalar>& z, Cache& cache) const {
    if (z.channels() != channels_) {
      throw ConfigError("direction selector expects " + std::to_string(channels_) + " channels, feature map has " +
                        std::to_string(z.channels()));
    }
    if (!z.values.allFinite()) throw std::invalid_argument("direction selector: non-finite feature map");
    cache.act1 = relu(conv1_.forward(z, cache.conv1));
    cache.act2 = relu(conv2_.forward(cache.act1, cache.conv2));
    cache.pooled = cache.act2.values.rowwise().mean();
    auto out = direction_from_logits<Scalar>(fc_.forward(cache.pooled));
    cache.soft = out.soft;
    return out;
  }

  /// `d_direction` is dL/dd at the hard vector; returns dL/dz.
  FeatureMap<Scalar> backward(const Cache& cache, const Vector<Scalar>& d_direction) {
    const Vector<Scalar> d_logits = d_direction.cwiseProduct(cache.soft.cwiseProduct((Scalar(1) - cache.soft.array()).matrix()));
    const Vector<Scalar> d_pooled = fc_.backward(cache.pooled, d_logits);
    FeatureMap<Scalar> d_act2(cache.act2.channels(), cache.act2.height, cache.act2.width);
    d_act2.values.colwise() = d_pooled / Scalar(cache.act2.pixels());
    auto g = conv2_.backward(cache.conv2, relu_backward(cache.act2, d_act2));
    return conv1_.backward(cache.conv1, relu_backward(cache.act1, g));
  }

  void collect(ParameterList<Scalar>& out) {
    conv1_.collect(out);
    conv2_.collect(out);
    fc_.collect(out);
  }

 private:
  Index channels_ = 0;
  Conv2d<Scalar> conv1_;
  Conv2d<Scalar> conv2_;
  Linear<Scalar> fc_;
};

template <typename Scalar>
DirectionOutput<Scalar> select_direction(const FeatureMap<Scalar>& z, const DirectionSelector<Scalar>& selector) {
  typename DirectionSelector<Scalar>::Cache cache;
  return selector.forward(z, cache);
}

// ---------------------------------------------------------------------------
// Intensity s = μ + σ ⊙ ξ

template <typename Scalar>
struct IntensityParams {
  Parameter<Scalar> mu;
  Parameter<Scalar> sigma;

  IntensityParams() = default;
  explicit IntensityParams(Index channels, const std::string& name = "intensity")
      : mu(name + ".mu", channels, 1), sigma(name + ".sigma", channels, 1) {
    sigma.value.setOnes();
  }

  Index channels() const { return mu.value.rows(); }

  void collect(ParameterList<Scalar>& out) {
    out.push_back(&mu);
    out.push_back(&sigma);
  }
};

template <typename Scalar>
Vector<Scalar> compose_intensity(const Vector<Scalar>& xi, const Vector<Scalar>& mu, const Vector<Scalar>& sigma) {
  if (xi.size() != mu.size() || xi.size() != sigma.size()) {
    throw ShapeError("compose_intensity: length mismatch (xi " + std::to_string(xi.size()) + ", mu " +
                     std::to_string(mu.size()) + ", sigma " + std::to_string(sigma.size()) + ")");
  }
  return mu + sigma.cwiseProduct(xi);
}

template <typename Scalar>
Vector<Scalar> compose_intensity(const Vector<Scalar>& xi, const IntensityParams<Scalar>& params) {
  return compose_intensity<Scalar>(xi, params.mu.value.col(0), params.sigma.value.col(0));
}

template <typename Scalar>
void compose_intensity_backward(const Vector<Scalar>& xi, const Vector<Scalar>& d_intensity, IntensityParams<Scalar>& params) {
  params.mu.grad.col(0) += d_intensity;
  params.sigma.grad.col(0) += d_intensity.cwiseProduct(xi);
}

// ---------------------------------------------------------------------------
// z̃ = z + d ⊙ s, s broadcast over H×W

template <typename Scalar>
FeatureMap<Scalar> apply_augmentation(const FeatureMap<Scalar>& z, const Vector<Scalar>& direction,
                                      const Vector<Scalar>& intensity) {
  if (direction.size() != z.channels() || intensity.size() != z.channels()) {
    throw ShapeError("apply_augmentation: feature map has " + std::to_string(z.channels()) + " channels, d has " +
                     std::to_string(direction.size()) + ", s has " + std::to_string(intensity.size()));
  }
  FeatureMap<Scalar> out = z;
  for (Index c = 0; c < z.channels(); ++c) {
    // unselected channels stay bitwise identical (no +0.0 rewrite of -0.0)
    if (direction[c] != Scalar(0)) out.values.row(c).array() += direction[c] * intensity[c];
  }
  return out;
}

template <typename Scalar>
struct AugmentationGrad {
  Vector<Scalar> d_direction;
  Vector<Scalar> d_intensity;
};

/// Gradients of apply_augmentation w.r.t. d and s; dL/dz equals the incoming gradient.
template <typename Scalar>
AugmentationGrad<Scalar> apply_augmentation_backward(const FeatureMap<Scalar>& d_out, const Vector<Scalar>& direction,
                                                     const Vector<Scalar>& intensity) {
  const Vector<Scalar> channel_sum = d_out.values.rowwise().sum();
  return {channel_sum.cwiseProduct(intensity), channel_sum.cwiseProduct(direction)};
}

}  // namespace sdfa
