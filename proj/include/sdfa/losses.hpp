#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "sdfa/tensor.hpp"

namespace sdfa {

/// Smoothing term of the soft Dice loss.
inline constexpr double kDiceSmooth = 1e-5;

/// Per-pixel softmax over the channel (class) axis.
template <typename Scalar>
FeatureMap<Scalar> softmax(const FeatureMap<Scalar>& logits) {
  FeatureMap<Scalar> p(logits.values.rowwise() - logits.values.colwise().maxCoeff(), logits.height, logits.width);
  p.values = p.values.array().exp().matrix();
  const auto sums = p.values.colwise().sum().eval();
  for (Index j = 0; j < p.values.cols(); ++j) p.values.col(j) /= sums[j];
  return p;
}

/// Vector-Jacobian product of softmax: given dL/dp returns dL/dlogits.
template <typename Scalar>
FeatureMap<Scalar> softmax_backward(const FeatureMap<Scalar>& probs, const FeatureMap<Scalar>& d_probs) {
  const auto inner = probs.values.cwiseProduct(d_probs.values).colwise().sum().eval();
  FeatureMap<Scalar> d(d_probs.values.rowwise() - inner, probs.height, probs.width);
  d.values = d.values.cwiseProduct(probs.values);
  return d;
}

inline void check_labels(const LabelMap& labels, Index classes, Index height, Index width, const char* who) {
  if (labels.rows() != height || labels.cols() != width) {
    throw ShapeError(std::string(who) + ": label map " + std::to_string(labels.rows()) + "x" +
                     std::to_string(labels.cols()) + " does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels.data()[i] >= classes) {
      throw std::out_of_range(std::string(who) + ": label " + std::to_string(labels.data()[i]) + " >= " +
                              std::to_string(classes) + " classes");
    }
  }
}

template <typename Scalar>
FeatureMap<Scalar> one_hot(const LabelMap& labels, Index classes) {
  check_labels(labels, classes, labels.rows(), labels.cols(), "one_hot");
  FeatureMap<Scalar> t(classes, labels.rows(), labels.cols());
  for (Index i = 0; i < labels.size(); ++i) t.values(labels.data()[i], i) = Scalar(1);
  return t;
}

/// 1 − (1/K) Σ_k (2 Σ p·t + ε) / (Σ p + Σ t + ε)
template <typename Scalar>
Scalar dice_loss(const FeatureMap<Scalar>& probs, const FeatureMap<Scalar>& target) {
  if (!probs.same_shape(target)) {
    throw ShapeError("dice_loss: " + shape_string(probs) + " vs " + shape_string(target));
  }
  const Scalar eps(kDiceSmooth);
  const auto inter = probs.values.cwiseProduct(target.values).rowwise().sum().array();
  const auto denom = probs.values.rowwise().sum().array() + target.values.rowwise().sum().array() + eps;
  return Scalar(1) - ((Scalar(2) * inter + eps) / denom).mean();
}

template <typename Scalar>
FeatureMap<Scalar> dice_loss_grad(const FeatureMap<Scalar>& probs, const FeatureMap<Scalar>& target) {
  if (!probs.same_shape(target)) {
    throw ShapeError("dice_loss: " + shape_string(probs) + " vs " + shape_string(target));
  }
  const Scalar eps(kDiceSmooth);
  const Scalar k = Scalar(probs.channels());
  const Vector<Scalar> numer = (Scalar(2) * probs.values.cwiseProduct(target.values).rowwise().sum().array() + eps).matrix();
  const Vector<Scalar> denom =
      (probs.values.rowwise().sum().array() + target.values.rowwise().sum().array() + eps).matrix();
  FeatureMap<Scalar> g(probs.channels(), probs.height, probs.width);
  for (Index c = 0; c < probs.channels(); ++c) {
    const Scalar d = denom[c];
    g.values.row(c) = -(Scalar(2) * d * target.values.row(c).array() - numer[c]) / (k * d * d);
  }
  return g;
}

/// Mean over pixels of −log softmax(logits)[target].
template <typename Scalar>
Scalar ce_loss(const FeatureMap<Scalar>& logits, const LabelMap& target) {
  check_labels(target, logits.channels(), logits.height, logits.width, "ce_loss");
  if (!logits.values.allFinite()) throw std::invalid_argument("ce_loss: non-finite logits");
  const auto maxes = logits.values.colwise().maxCoeff().eval();
  Scalar total(0);
  for (Index j = 0; j < logits.values.cols(); ++j) {
    const Scalar lse = maxes[j] + std::log((logits.values.col(j).array() - maxes[j]).exp().sum());
    total += lse - logits.values(target.data()[j], j);
  }
  return total / Scalar(logits.pixels());
}

template <typename Scalar>
FeatureMap<Scalar> ce_loss_grad(const FeatureMap<Scalar>& logits, const LabelMap& target) {
  check_labels(target, logits.channels(), logits.height, logits.width, "ce_loss");
  FeatureMap<Scalar> g = softmax(logits);
  for (Index j = 0; j < g.values.cols(); ++j) g.values(target.data()[j], j) -= Scalar(1);
  g.values /= Scalar(logits.pixels());
  return g;
}

/// Per-sample segmentation loss L_seg = Dice(softmax(logits)) + CE(logits).
template <typename Scalar>
struct SegmentationLoss {
  Scalar dice = 0;
  Scalar ce = 0;
  FeatureMap<Scalar> d_logits;  // filled only when requested

  Scalar total() const { return dice + ce; }
};

template <typename Scalar>
SegmentationLoss<Scalar> segmentation_loss(const FeatureMap<Scalar>& logits, const LabelMap& target,
                                           bool with_grad = true) {
  SegmentationLoss<Scalar> out;
  const auto probs = softmax(logits);
  const auto onehot = one_hot<Scalar>(target, logits.channels());
  out.dice = dice_loss(probs, onehot);
  out.ce = ce_loss(logits, target);
  if (with_grad) {
    out.d_logits = softmax_backward(probs, dice_loss_grad(probs, onehot));
    out.d_logits.values += ce_loss_grad(logits, target).values;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch-level objective

template <typename Scalar>
void check_lengths(const Vector<Scalar>& ori, const Vector<Scalar>& aug, const char* who) {
  if (ori.size() != aug.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(ori.size()) + " original vs " +
                     std::to_string(aug.size()) + " augmented losses");
  }
}

/// mean(ori) + λ·mean(aug)
template <typename Scalar>
Scalar supervised_loss(const Vector<Scalar>& ori, const Vector<Scalar>& aug, Scalar lambda) {
  check_lengths(ori, aug, "supervised_loss");
  if (lambda == Scalar(0)) return ori.mean();
  return ori.mean() + lambda * aug.mean();
}

/// (1/N) Σ_i 1[aug_i > ori_i]·|aug_i − ori_i|
template <typename Scalar>
Scalar selective_consistency(const Vector<Scalar>& ori, const Vector<Scalar>& aug) {
  check_lengths(ori, aug, "selective_consistency");
  if (ori.size() == 0) throw std::invalid_argument("selective_consistency: empty batch");
  Scalar sum(0);
  for (Index i = 0; i < ori.size(); ++i) {
    if (aug[i] > ori[i]) sum += aug[i] - ori[i];
  }
  return sum / Scalar(ori.size());
}

/// Gradient w.r.t. the augmented losses. The gate is a constant and the
/// original losses are a detached reference, so they receive nothing.
template <typename Scalar>
Vector<Scalar> selective_consistency_grad(const Vector<Scalar>& ori, const Vector<Scalar>& aug) {
  check_lengths(ori, aug, "selective_consistency");
  return ((aug.array() > ori.array()).template cast<Scalar>() / Scalar(ori.size())).matrix();
}

template <typename Scalar>
struct LossBreakdown {
  Vector<Scalar> per_sample_ori;
  Vector<Scalar> per_sample_aug;
  Scalar lambda = 0;
  Scalar scl = 0;
  Scalar total = 0;
};

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Vector<Scalar>& ori, const Vector<Scalar>& aug, Scalar lambda, bool enable_scl) {
  if (lambda < Scalar(0)) throw ConfigError("lambda must be >= 0");
  LossBreakdown<Scalar> out;
  out.per_sample_ori = ori;
  out.per_sample_aug = aug;
  out.lambda = lambda;
  out.scl = enable_scl ? selective_consistency(ori, aug) : Scalar(0);
  out.total = supervised_loss(ori, aug, lambda) + out.scl;
  return out;
}

}  // namespace sdfa
