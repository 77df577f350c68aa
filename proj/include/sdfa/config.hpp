#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "sdfa/data.hpp"
#include "sdfa/unet.hpp"

namespace sdfa {

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  int iterations = 2000;  // 15000 at paper scale
  int batch_size = 8;
  double lambda = 1.0;
  bool enable_sds = true;
  bool enable_sis = true;
  bool enable_scl = true;
  std::uint64_t seed = 0;
  int cov_refresh = 50;
  int buffer = 256;
  int warmup_min = 8;
  int eval_every = 100;
  double val_fraction = 0.2;
  ImageAugmentOptions image_aug;

  void validate() const;

  /// The augmented branch matters to the objective only through λ or SCL.
  bool augmentation_contributes() const { return lambda > 0.0 || enable_scl; }
};

/// One training step as written to the metrics log.
struct StepRecord {
  long step = 0;
  double loss_ori = 0.0;
  double loss_aug = 0.0;
  double scl = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double channels_selected = 0.0;  // Σ_c d_c averaged over the batch
  double grad_norm = 0.0;
  bool augmented = false;
  bool covariance_noise = false;  // false while the sampler is in N(0, I) fallback
};

struct ExperimentConfig {
  BackboneConfig backbone;
  TrainConfig train;
  std::filesystem::path output_dir = "runs/default";
};

nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const ExperimentConfig& c);

/// Missing keys keep their defaults; unknown keys and bad values throw
/// ConfigError naming the field.
BackboneConfig backbone_config_from_json(const nlohmann::json& j, BackboneConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

StepRecord step_record_from_json(const nlohmann::json& j);

}  // namespace sdfa
