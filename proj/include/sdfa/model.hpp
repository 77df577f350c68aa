#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "sdfa/augment.hpp"
#include "sdfa/config.hpp"
#include "sdfa/unet.hpp"

namespace sdfa {

/// Everything learnable: backbone, direction selector, intensity μ/σ.
template <typename Scalar>
class SdfaModel {
 public:
  explicit SdfaModel(const BackboneConfig& config)
      : backbone(config), selector(config.bottleneck_channels()), intensity(config.bottleneck_channels()) {
    Rng rng(derive_seed(config.seed, 2));
    selector.init(rng);
  }

  SdfaModel(const SdfaModel&) = delete;
  SdfaModel& operator=(const SdfaModel&) = delete;

  const BackboneConfig& config() const { return backbone.config(); }

  /// Stable order; pointers stay valid for the lifetime of the model.
  ParameterList<Scalar> parameters() {
    ParameterList<Scalar> out;
    backbone.collect(out);
    selector.collect(out);
    intensity.collect(out);
    return out;
  }

  Index parameter_count() {
    Index n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<Matrix<Scalar>> snapshot() {
    std::vector<Matrix<Scalar>> out;
    for (auto* p : parameters()) out.push_back(p->value);
    return out;
  }

  void restore(const std::vector<Matrix<Scalar>>& values) {
    auto params = parameters();
    if (values.size() != params.size()) throw ShapeError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }

  UNet<Scalar> backbone;
  DirectionSelector<Scalar> selector;
  IntensityParams<Scalar> intensity;
};

/// Decoupled weight decay Adam: p ← p − lr·wd·p, then the bias-corrected Adam step.
template <typename Scalar>
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParameterList<Scalar>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const Scalar decay = Scalar(1.0 - lr_ * weight_decay_);
    const Scalar step_size = Scalar(lr_ / c1);
    const Scalar b1 = Scalar(beta1_), b2 = Scalar(beta2_);
    const Scalar root_c2 = Scalar(std::sqrt(c2)), eps = Scalar(eps_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      p.value *= decay;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / root_c2 + eps);
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix<Scalar>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint archive:
//   8-byte magic "SDFACKP1"
//   uint64 little-endian header length
//   UTF-8 JSON header {"backbone": {...}, "dtype": "float32"|"float64",
//                      "arrays": [{"name", "rows", "cols", "offset"}...]}
//   raw little-endian array payload, row-major, offsets relative to payload start

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'F', 'A', 'C', 'K', 'P', '1'};

template <typename Scalar>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? "float32" : "float64";
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, SdfaModel<Scalar>& model) {
  nlohmann::json header{{"backbone", to_json(model.config())}, {"dtype", dtype_name<Scalar>()}, {"arrays", nlohmann::json::array()}};
  std::uint64_t offset = 0;
  for (auto* p : model.parameters()) {
    header["arrays"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(Scalar);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto* p : model.parameters()) {
    out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(Scalar)));
  }
}

/// Reads the header only.
inline nlohmann::json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not an sdfa checkpoint: " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path.string());
  return nlohmann::json::parse(text);
}

inline BackboneConfig checkpoint_backbone_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return backbone_config_from_json(read_checkpoint_header(in, path).at("backbone"));
}

template <typename Scalar>
void load_checkpoint(const std::filesystem::path& path, SdfaModel<Scalar>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const auto header = read_checkpoint_header(in, path);
  if (backbone_config_from_json(header.at("backbone")) != model.config()) {
    throw ConfigError("checkpoint backbone config does not match the model");
  }
  if (header.at("dtype").get<std::string>() != dtype_name<Scalar>()) throw ConfigError("checkpoint dtype mismatch");
  const auto params = model.parameters();
  const auto& arrays = header.at("arrays");
  if (arrays.size() != params.size()) throw ConfigError("checkpoint parameter count mismatch");
  const auto payload = in.tellg();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& a = arrays[i];
    if (a.at("name").get<std::string>() != p.name || a.at("rows").get<Index>() != p.value.rows() ||
        a.at("cols").get<Index>() != p.value.cols()) {
      throw ConfigError("checkpoint array mismatch at " + p.name);
    }
    in.seekg(payload + static_cast<std::streamoff>(a.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(Scalar)));
    if (!in) throw std::runtime_error("truncated checkpoint payload at " + p.name);
  }
}

}  // namespace sdfa
