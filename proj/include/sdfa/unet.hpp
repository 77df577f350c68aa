#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdfa/augment.hpp"
#include "sdfa/layers.hpp"
#include "sdfa/random.hpp"
#include "sdfa/tensor.hpp"

namespace sdfa {

struct BackboneConfig {
  int in_channels = 1;
  int num_classes = 2;
  int base_width = 16;
  int depth = 4;
  std::uint64_t seed = 0;

  /// Width doubles per encoder level; the bottleneck keeps the deepest width.
  Index bottleneck_channels() const { return Index(base_width) << (depth - 1); }
  Index level_width(int level) const { return Index(base_width) << level; }
  Index downsample_factor() const { return Index(1) << depth; }

  void validate() const {
    if (in_channels < 1) throw ConfigError("backbone.in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("backbone.num_classes must be >= 2");
    if (base_width < 4) throw ConfigError("backbone.base_width must be >= 4");
    if (depth < 2) throw ConfigError("backbone.depth must be >= 2");
    if (depth > 8) throw ConfigError("backbone.depth must be <= 8");
  }

  bool operator==(const BackboneConfig&) const = default;
};

/// Compact U-Net: `depth` encoder blocks each followed by 2×2 max pooling, a
/// bottleneck block, and `depth` decoder blocks (nearest upsample, concat with
/// the matching skip, conv block), then a 1×1 classifier.
template <typename Scalar>
class UNet {
 public:
  struct EncoderTrace {
    std::vector<typename ConvBlock<Scalar>::Cache> blocks;
    std::vector<PoolCache<Scalar>> pools;
    typename ConvBlock<Scalar>::Cache bottleneck;
  };

  struct Encoded {
    FeatureMap<Scalar> bottleneck;
    std::vector<FeatureMap<Scalar>> skips;  // shallow → deep
    EncoderTrace trace;
  };

  struct DecoderTrace {
    std::vector<typename ConvBlock<Scalar>::Cache> blocks;  // indexed by level
    std::vector<Index> upsampled_channels;
    typename Conv2d<Scalar>::Cache head;
  };

  struct DecoderGrad {
    FeatureMap<Scalar> d_bottleneck;
    std::vector<FeatureMap<Scalar>> d_skips;
  };

  UNet() = default;
  explicit UNet(const BackboneConfig& config, const std::string& name = "backbone") : config_(config) {
    config_.validate();
    Index in = config_.in_channels;
    for (int l = 0; l < config_.depth; ++l) {
      encoder_.emplace_back(name + ".encoder." + std::to_string(l), in, config_.level_width(l));
      in = config_.level_width(l);
    }
    bottleneck_ = ConvBlock<Scalar>(name + ".bottleneck", in, config_.bottleneck_channels());
    Index below = config_.bottleneck_channels();
    decoder_.resize(static_cast<std::size_t>(config_.depth));
    for (int l = config_.depth - 1; l >= 0; --l) {
      decoder_[static_cast<std::size_t>(l)] =
          ConvBlock<Scalar>(name + ".decoder." + std::to_string(l), below + config_.level_width(l), config_.level_width(l));
      below = config_.level_width(l);
    }
    head_ = Conv2d<Scalar>(name + ".head", config_.level_width(0), config_.num_classes, 1);
    Rng rng(derive_seed(config_.seed, 1));
    for (auto& b : encoder_) b.init(rng);
    bottleneck_.init(rng);
    for (auto& b : decoder_) b.init(rng);
    head_.init(rng);
  }

  const BackboneConfig& config() const { return config_; }

  Encoded encode(const FeatureMap<Scalar>& x) const {
    if (x.channels() != config_.in_channels) {
      throw ShapeError("encode: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                       std::to_string(x.channels()));
    }
    const Index f = config_.downsample_factor();
    if (x.height % f != 0 || x.width % f != 0) {
      const Index ph = (f - x.height % f) % f, pw = (f - x.width % f) % f;
      throw ShapeError("encode: spatial dims " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                       " must be divisible by " + std::to_string(f) + " (pad by " + std::to_string(ph) + " rows, " +
                       std::to_string(pw) + " cols)");
    }
    Encoded out;
    out.trace.blocks.resize(encoder_.size());
    out.trace.pools.resize(encoder_.size());
    FeatureMap<Scalar> h = x;
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      out.skips.push_back(encoder_[l].forward(h, out.trace.blocks[l]));
      h = max_pool2(out.skips.back(), out.trace.pools[l]);
    }
    out.bottleneck = bottleneck_.forward(h, out.trace.bottleneck);
    return out;
  }

  FeatureMap<Scalar> decode(const FeatureMap<Scalar>& bottleneck, const std::vector<FeatureMap<Scalar>>& skips,
                            DecoderTrace& trace) const {
    if (skips.size() != decoder_.size()) throw ShapeError("decode: wrong number of skip activations");
    if (bottleneck.channels() != config_.bottleneck_channels()) {
      throw ShapeError("decode: bottleneck has " + std::to_string(bottleneck.channels()) + " channels, expected " +
                       std::to_string(config_.bottleneck_channels()));
    }
    trace.blocks.resize(decoder_.size());
    trace.upsampled_channels.resize(decoder_.size());
    FeatureMap<Scalar> h = bottleneck;
    for (int l = config_.depth - 1; l >= 0; --l) {
      const auto ul = static_cast<std::size_t>(l);
      auto up = upsample2(h);
      if (up.height != skips[ul].height || up.width != skips[ul].width) {
        throw ShapeError("decode: skip " + std::to_string(l) + " is " + shape_string(skips[ul]) +
                         ", upsampled path is " + shape_string(up));
      }
      trace.upsampled_channels[ul] = up.channels();
      h = decoder_[ul].forward(concat_channels(up, skips[ul]), trace.blocks[ul]);
    }
    return head_.forward(h, trace.head);
  }

  FeatureMap<Scalar> decode(const FeatureMap<Scalar>& bottleneck, const std::vector<FeatureMap<Scalar>>& skips) const {
    DecoderTrace trace;
    return decode(bottleneck, skips, trace);
  }

  /// Plain inference path.
  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& x) const {
    auto enc = encode(x);
    return decode(enc.bottleneck, enc.skips);
  }

  DecoderGrad decode_backward(const DecoderTrace& trace, const FeatureMap<Scalar>& d_logits) {
    DecoderGrad g;
    g.d_skips.resize(decoder_.size());
    auto h = head_.backward(trace.head, d_logits);
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      auto d_cat = decoder_[l].backward(trace.blocks[l], h);
      const Index up_c = trace.upsampled_channels[l];
      g.d_skips[l] = FeatureMap<Scalar>(d_cat.values.bottomRows(d_cat.channels() - up_c), d_cat.height, d_cat.width);
      h = upsample2_backward(FeatureMap<Scalar>(d_cat.values.topRows(up_c), d_cat.height, d_cat.width));
    }
    g.d_bottleneck = std::move(h);
    return g;
  }

  /// Backpropagates into the encoder. `d_skips` may be empty (no skip gradient).
  void encode_backward(const EncoderTrace& trace, const FeatureMap<Scalar>& d_bottleneck,
                       const std::vector<FeatureMap<Scalar>>& d_skips) {
    auto h = bottleneck_.backward(trace.bottleneck, d_bottleneck);
    for (int l = config_.depth - 1; l >= 0; --l) {
      const auto ul = static_cast<std::size_t>(l);
      auto d_skip = max_pool2_backward(trace.pools[ul], h);
      if (!d_skips.empty()) d_skip.values += d_skips[ul].values;
      h = encoder_[ul].backward(trace.blocks[ul], d_skip);
    }
  }

  void collect(ParameterList<Scalar>& out) {
    for (auto& b : encoder_) b.collect(out);
    bottleneck_.collect(out);
    for (auto& b : decoder_) b.collect(out);
    head_.collect(out);
  }

 private:
  BackboneConfig config_;
  std::vector<ConvBlock<Scalar>> encoder_;
  ConvBlock<Scalar> bottleneck_;
  std::vector<ConvBlock<Scalar>> decoder_;
  Conv2d<Scalar> head_;
};

/// Per-sample choice of (d, s) handed to forward_dual.
template <typename Scalar>
struct AugmentDecision {
  Vector<Scalar> direction;
  Vector<Scalar> intensity;
};

template <typename Scalar>
using Augmentor = std::function<AugmentDecision<Scalar>(const FeatureMap<Scalar>& bottleneck, std::size_t sample)>;

template <typename Scalar>
struct ForwardOutputs {
  std::vector<FeatureMap<Scalar>> logits_ori;
  std::optional<std::vector<FeatureMap<Scalar>>> logits_aug;
  std::vector<FeatureMap<Scalar>> bottleneck;
  Matrix<Scalar> direction;  // N × C
  Matrix<Scalar> intensity;  // N × C
};

/// Original and augmented logits through one shared decoder. The augmented pass
/// perturbs only the bottleneck and reuses the unperturbed skips.
template <typename Scalar>
ForwardOutputs<Scalar> forward_dual(const UNet<Scalar>& net, const std::vector<FeatureMap<Scalar>>& images,
                                    const Augmentor<Scalar>& augmentor, bool enabled) {
  ForwardOutputs<Scalar> out;
  const Index n = static_cast<Index>(images.size());
  const Index c = net.config().bottleneck_channels();
  out.direction = Matrix<Scalar>::Zero(n, c);
  out.intensity = Matrix<Scalar>::Zero(n, c);
  if (enabled) out.logits_aug.emplace();
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto enc = net.encode(images[i]);
    out.logits_ori.push_back(net.decode(enc.bottleneck, enc.skips));
    if (enabled) {
      if (!augmentor) throw ConfigError("forward_dual: augmentation enabled without an augmentor");
      const auto decision = augmentor(enc.bottleneck, i);
      if (decision.direction.size() != c || decision.intensity.size() != c) {
        throw ConfigError("forward_dual: augmentor produced vectors of the wrong length for C=" + std::to_string(c));
      }
      out.direction.row(static_cast<Index>(i)) = decision.direction.transpose();
      out.intensity.row(static_cast<Index>(i)) = decision.intensity.transpose();
      out.logits_aug->push_back(
          net.decode(apply_augmentation(enc.bottleneck, decision.direction, decision.intensity), enc.skips));
    }
    out.bottleneck.push_back(std::move(enc.bottleneck));
  }
  return out;
}

}  // namespace sdfa
