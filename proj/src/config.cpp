#include "sdfa/config.hpp"

#include <fstream>
#include <set>

using nlohmann::json;

namespace sdfa {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be >= 0");
  if (cov_refresh < 1) throw ConfigError("train.cov_refresh must be >= 1");
  if (buffer < 1) throw ConfigError("train.buffer must be >= 1");
  if (warmup_min < 1) throw ConfigError("train.warmup_min must be >= 1");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train.val_fraction must be in (0, 1)");
}

json to_json(const BackboneConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"base_width", c.base_width},
              {"depth", c.depth},
              {"seed", c.seed}};
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"iterations", c.iterations},
              {"batch_size", c.batch_size},
              {"lambda", c.lambda},
              {"enable_sds", c.enable_sds},
              {"enable_sis", c.enable_sis},
              {"enable_scl", c.enable_scl},
              {"seed", c.seed},
              {"cov_refresh", c.cov_refresh},
              {"buffer", c.buffer},
              {"warmup_min", c.warmup_min},
              {"eval_every", c.eval_every},
              {"val_fraction", c.val_fraction},
              {"image_aug", c.image_aug.enabled}};
}

json to_json(const StepRecord& r) {
  return json{{"step", r.step},
              {"loss_ori", r.loss_ori},
              {"loss_aug", r.loss_aug},
              {"scl", r.scl},
              {"total", r.total},
              {"lambda", r.lambda},
              {"channels_selected", r.channels_selected},
              {"grad_norm", r.grad_norm},
              {"augmented", r.augmented},
              {"covariance_noise", r.covariance_noise}};
}

json to_json(const ExperimentConfig& c) {
  return json{{"backbone", to_json(c.backbone)}, {"train", to_json(c.train)}, {"output_dir", c.output_dir.string()}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(section + "." + key + ": unknown field");
  }
}

template <typename T>
void read(const json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

}  // namespace

BackboneConfig backbone_config_from_json(const json& j, BackboneConfig c) {
  reject_unknown(j, {"in_channels", "num_classes", "base_width", "depth", "seed"}, "backbone");
  read(j, "backbone", "in_channels", c.in_channels);
  read(j, "backbone", "num_classes", c.num_classes);
  read(j, "backbone", "base_width", c.base_width);
  read(j, "backbone", "depth", c.depth);
  read(j, "backbone", "seed", c.seed);
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j,
                 {"lr", "weight_decay", "iterations", "batch_size", "lambda", "enable_sds", "enable_sis", "enable_scl",
                  "seed", "cov_refresh", "buffer", "warmup_min", "eval_every", "val_fraction", "image_aug"},
                 "train");
  read(j, "train", "lr", c.lr);
  read(j, "train", "weight_decay", c.weight_decay);
  read(j, "train", "iterations", c.iterations);
  read(j, "train", "batch_size", c.batch_size);
  read(j, "train", "lambda", c.lambda);
  read(j, "train", "enable_sds", c.enable_sds);
  read(j, "train", "enable_sis", c.enable_sis);
  read(j, "train", "enable_scl", c.enable_scl);
  read(j, "train", "seed", c.seed);
  read(j, "train", "cov_refresh", c.cov_refresh);
  read(j, "train", "buffer", c.buffer);
  read(j, "train", "warmup_min", c.warmup_min);
  read(j, "train", "eval_every", c.eval_every);
  read(j, "train", "val_fraction", c.val_fraction);
  read(j, "train", "image_aug", c.image_aug.enabled);
  c.validate();
  return c;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown(j, {"backbone", "train", "output_dir"}, "config");
  ExperimentConfig c;
  if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("output_dir")) {
    std::string out;
    read(j, "config", "output_dir", out);
    c.output_dir = out;
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

StepRecord step_record_from_json(const json& j) {
  StepRecord r;
  r.step = j.at("step").get<long>();
  r.loss_ori = j.at("loss_ori").get<double>();
  r.loss_aug = j.at("loss_aug").get<double>();
  r.scl = j.at("scl").get<double>();
  r.total = j.at("total").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.channels_selected = j.at("channels_selected").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.augmented = j.value("augmented", false);
  r.covariance_noise = j.value("covariance_noise", false);
  return r;
}

}  // namespace sdfa
