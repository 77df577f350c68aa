#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string_view>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdfa/config.hpp"
#include "sdfa/covariance.hpp"
#include "sdfa/data.hpp"
#include "sdfa/losses.hpp"
#include "sdfa/metrics.hpp"
#include "sdfa/model.hpp"

namespace sdfa {

/// Thrown when a step produces a non-finite loss; carries the offending record.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const StepRecord& r, const std::string& what) : std::runtime_error(what), record(r) {}
  StepRecord record;
};

struct EvalReport {
  EvalResult overall;
  std::map<int, EvalResult> per_domain;
};

/// Inference-only evaluation: argmax of the unperturbed path. Samples are
/// processed in chunks of `batch_size`; every sample is independent, so the
/// chunking only bounds peak memory.
template <typename Scalar>
EvalReport evaluate(const UNet<Scalar>& net, std::span<const SegmentationSample> samples, std::size_t batch_size = 8) {
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
  std::vector<LabelMap> preds, gts;
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    for (std::size_t i = start; i < end; ++i) {
      preds.push_back(argmax_labels(net.forward(samples[i].image.template cast<Scalar>())));
      gts.push_back(samples[i].mask);
      by_domain[samples[i].domain_id].push_back(i);
    }
  }
  const int k = net.config().num_classes;
  EvalReport report;
  report.overall = evaluate_masks(preds, gts, k);
  for (const auto& [domain, idx] : by_domain) {
    std::vector<LabelMap> p, g;
    for (auto i : idx) {
      p.push_back(preds[i]);
      g.push_back(gts[i]);
    }
    report.per_domain[domain] = evaluate_masks(p, g, k);
  }
  return report;
}

/// One training run over a fixed sample pool. Batches are drawn from their own
/// RNG stream and augmentation draws from another, so runs that differ only in
/// augmentation settings see identical batches.
template <typename Scalar>
class Trainer {
 public:
  Trainer(SdfaModel<Scalar>& model, const TrainConfig& config, std::vector<SegmentationSample> train)
      : model_(model),
        config_(config),
        train_(std::move(train)),
        optimizer_(config.lr, config.weight_decay),
        batch_rng_(derive_seed(config.seed, 10)),
        aug_rng_(derive_seed(config.seed, 11)),
        bank_(source_domains(train_), model.config().bottleneck_channels(),
              {static_cast<std::size_t>(config.buffer), config.cov_refresh, static_cast<std::size_t>(config.warmup_min)}) {
    config_.validate();
    if (train_.empty()) throw ConfigError("trainer: empty training set");
    for (std::size_t i = 0; i < train_.size(); ++i) by_domain_[train_[i].domain_id].push_back(i);
    for (const auto& [d, _] : by_domain_) domains_.push_back(d);
    params_ = model_.parameters();
  }

  const TrainConfig& config() const { return config_; }
  const CovarianceBank& bank() const { return bank_; }
  long step() const { return step_; }

  /// Uniform over training domains, then uniform within the domain.
  std::vector<SegmentationSample> sample_batch() {
    std::vector<SegmentationSample> batch;
    std::uniform_int_distribution<std::size_t> pick_domain(0, domains_.size() - 1);
    for (int b = 0; b < config_.batch_size; ++b) {
      const auto& pool = by_domain_.at(domains_[pick_domain(batch_rng_)]);
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const auto& s = train_[pool[pick(batch_rng_)]];
      batch.push_back(config_.image_aug.enabled ? augment_image(s, config_.image_aug, batch_rng_) : s);
    }
    return batch;
  }

  /// Forward and backward over a batch; gradients are accumulated into the
  /// (zeroed) parameters. Returns the loss breakdown and fills `record`.
  LossBreakdown<Scalar> compute_gradients(const std::vector<SegmentationSample>& batch, StepRecord& record) {
    model_.zero_grad();
    const auto n = static_cast<Index>(batch.size());
    const bool augment = config_.augmentation_contributes();
    const Index c = model_.config().bottleneck_channels();
    Vector<Scalar> ori = Vector<Scalar>::Zero(n), aug = Vector<Scalar>::Zero(n);
    const Scalar lambda = Scalar(config_.lambda);
    const Scalar inv_n = Scalar(1) / Scalar(n);
    double selected = 0.0;
    auto& net = model_.backbone;

    if (augment && config_.enable_sis) bank_.maybe_refresh(step_, aug_rng_);
    record.covariance_noise = augment && config_.enable_sis && bank_.has_covariances();

    for (Index i = 0; i < n; ++i) {
      const auto& sample = batch[static_cast<std::size_t>(i)];
      const auto x = sample.image.template cast<Scalar>();
      auto enc = net.encode(x);
      typename UNet<Scalar>::DecoderTrace trace_ori;
      const auto logits_ori = net.decode(enc.bottleneck, enc.skips, trace_ori);
      auto seg_ori = segmentation_loss(logits_ori, sample.mask);
      ori[i] = seg_ori.total();
      seg_ori.d_logits.values *= inv_n;
      auto g_ori = net.decode_backward(trace_ori, seg_ori.d_logits);
      FeatureMap<Scalar> dz = std::move(g_ori.d_bottleneck);
      auto d_skips = std::move(g_ori.d_skips);

      if (augment) {
        // direction
        typename DirectionSelector<Scalar>::Cache sel_cache;
        Vector<Scalar> d(c);
        if (config_.enable_sds) {
          d = model_.selector.forward(enc.bottleneck, sel_cache).hard;
        } else {
          std::bernoulli_distribution coin(0.5);
          for (Index k = 0; k < c; ++k) d[k] = coin(aug_rng_) ? Scalar(1) : Scalar(0);
        }
        // intensity
        Vector<Scalar> xi, s;
        if (config_.enable_sis) {
          bank_.update(sample.domain_id, pool_features(enc.bottleneck));
          xi = bank_.sample_noise(sample.domain_id, aug_rng_).template cast<Scalar>();
          s = compose_intensity(xi, model_.intensity);
        } else {
          xi = standard_normal(c, aug_rng_).template cast<Scalar>();
          s = xi;
        }
        selected += static_cast<double>(d.sum());

        typename UNet<Scalar>::DecoderTrace trace_aug;
        const auto logits_aug = net.decode(apply_augmentation(enc.bottleneck, d, s), enc.skips, trace_aug);
        auto seg_aug = segmentation_loss(logits_aug, sample.mask);
        aug[i] = seg_aug.total();
        Scalar w = lambda * inv_n;
        if (config_.enable_scl && aug[i] > ori[i]) w += inv_n;
        if (w != Scalar(0)) {
          seg_aug.d_logits.values *= w;
          auto g_aug = net.decode_backward(trace_aug, seg_aug.d_logits);
          const auto ag = apply_augmentation_backward(g_aug.d_bottleneck, d, s);
          dz.values += g_aug.d_bottleneck.values;
          for (std::size_t l = 0; l < d_skips.size(); ++l) d_skips[l].values += g_aug.d_skips[l].values;
          if (config_.enable_sds) dz.values += model_.selector.backward(sel_cache, ag.d_direction).values;
          if (config_.enable_sis) compose_intensity_backward(xi, ag.d_intensity, model_.intensity);
        }
      }
      net.encode_backward(enc.trace, dz, d_skips);
    }

    auto breakdown = augment ? total_loss(ori, aug, lambda, config_.enable_scl) : total_loss(ori, ori, Scalar(0), false);
    if (!augment) breakdown.per_sample_aug = Vector<Scalar>::Zero(n);
    record.loss_ori = static_cast<double>(ori.mean());
    record.loss_aug = augment ? static_cast<double>(aug.mean()) : 0.0;
    record.scl = static_cast<double>(breakdown.scl);
    record.total = static_cast<double>(breakdown.total);
    record.lambda = config_.lambda;
    record.channels_selected = augment ? selected / static_cast<double>(n) : 0.0;
    record.augmented = augment;
    double sq = 0.0;
    for (auto* p : params_) sq += static_cast<double>(p->grad.squaredNorm());
    record.grad_norm = std::sqrt(sq);
    return breakdown;
  }

  StepRecord train_step(const std::vector<SegmentationSample>& batch) {
    StepRecord record;
    record.step = step_;
    try {
      compute_gradients(batch, record);
    } catch (const std::invalid_argument& e) {
      // NaN weights surface inside the layers before any loss is formed
      if (std::string_view(e.what()).find("non-finite") == std::string_view::npos) throw;
      record.total = std::numeric_limits<double>::quiet_NaN();
      throw NonFiniteLoss(record, "non-finite values at step " + std::to_string(step_) + ": " + e.what());
    }
    if (!std::isfinite(record.total) || !std::isfinite(record.grad_norm)) {
      throw NonFiniteLoss(record, "non-finite loss at step " + std::to_string(step_) + " (total=" +
                                      std::to_string(record.total) + ", grad_norm=" + std::to_string(record.grad_norm) + ")");
    }
    optimizer_.step(params_);
    ++step_;
    return record;
  }

  StepRecord train_step() { return train_step(sample_batch()); }

 private:
  static std::vector<int> source_domains(const std::vector<SegmentationSample>& samples) {
    std::vector<int> ids;
    for (const auto& s : samples) {
      if (std::find(ids.begin(), ids.end(), s.domain_id) == ids.end()) ids.push_back(s.domain_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  SdfaModel<Scalar>& model_;
  TrainConfig config_;
  std::vector<SegmentationSample> train_;
  std::map<int, std::vector<std::size_t>> by_domain_;
  std::vector<int> domains_;
  ParameterList<Scalar> params_;
  AdamW<Scalar> optimizer_;
  Rng batch_rng_;
  Rng aug_rng_;
  CovarianceBank bank_;
  long step_ = 0;
};

}  // namespace sdfa
