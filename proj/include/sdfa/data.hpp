#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdfa/random.hpp"
#include "sdfa/tensor.hpp"

namespace sdfa {

struct SegmentationSample {
  FeatureMap<float> image;  // in_channels × H × W, values in [0, 1]
  LabelMap mask;            // H × W class indices
  int domain_id = 0;
  std::string sample_id;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Appearance knobs of one synthetic domain. Anatomy (blob geometry) comes
/// from `seed` alone, so two specs with the same seed share masks.
struct SyntheticDomainSpec {
  std::string name = "domain";
  double intensity_bias = 0.0;
  double contrast_gain = 1.0;
  double noise_std = 0.0;
  double texture_freq = 0.0;  // cycles per image; 0 disables texture
  int blob_min = 1;
  int blob_max = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SyntheticDomainSpec& spec);
/// Throws ConfigError naming the offending field.
SyntheticDomainSpec domain_spec_from_json(const nlohmann::json& j);
/// Accepts either a bare array of specs or {"domains": [...]}.
std::vector<SyntheticDomainSpec> domain_specs_from_json(const nlohmann::json& j);

/// Elliptical blob in pixel coordinates.
struct Blob {
  double center_y = 0, center_x = 0;
  double radius_y = 1, radius_x = 1;
  double angle = 0;

  /// Normalized elliptical radius; < 1 inside.
  double rho(double y, double x) const;
};

inline constexpr double kBlobMinRadius = 0.10;  // fraction of min(H, W)
inline constexpr double kBlobMaxRadius = 0.20;
inline constexpr double kTextureAmplitude = 0.3;

std::vector<Blob> draw_blobs(Rng& rng, int height, int width, int blob_min, int blob_max);
/// Soft-edged shape render in [0, 1] (max over blobs).
Eigen::MatrixXf render_shapes(const std::vector<Blob>& blobs, int height, int width);
LabelMap rasterize_mask(const std::vector<Blob>& blobs, int height, int width);

std::vector<SegmentationSample> generate_domain(const SyntheticDomainSpec& spec, int n, int height, int width,
                                                int domain_id = 0);

struct Dataset {
  std::vector<std::string> domain_names;  // index == domain_id
  std::vector<SegmentationSample> samples;
  int num_classes = 2;
  int in_channels = 1;

  std::vector<int> domain_ids() const;
  /// Resolves a domain by name or by numeric id.
  int resolve_domain(const std::string& key) const;
};

/// Generates every domain of a spec list; domain ids follow list order.
Dataset generate_dataset(const std::vector<SyntheticDomainSpec>& specs, int n, int height, int width);

/// Writes root/<domain>/images/*.png, root/<domain>/masks/*.png and
/// root/manifest.json. `specs` may be empty for non-synthetic data.
void write_dataset(const std::filesystem::path& root, const Dataset& dataset,
                   const std::vector<SyntheticDomainSpec>& specs = {});

/// Loads the directory layout; domain ids are assigned by sorted domain name.
Dataset load_directory(const std::filesystem::path& root);

struct LodoSplit {
  int held_out_domain = 0;
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> val;
  std::vector<SegmentationSample> test;
};

/// Held-out domain → test; every other domain contributes floor(val_fraction·n)
/// validation samples (at least one when n ≥ 2), the rest to train.
LodoSplit lodo_split(const std::vector<SegmentationSample>& samples, int held_out_domain, double val_fraction,
                     std::uint64_t seed);

/// Image-level augmentations (brightness, contrast, Gaussian noise, elastic).
struct ImageAugmentOptions {
  bool enabled = false;
  double brightness = 0.1;
  double contrast = 0.2;
  double noise_std = 0.03;
  double elastic_alpha = 2.0;  // max displacement in pixels
  int elastic_grid = 4;
};

SegmentationSample augment_image(const SegmentationSample& sample, const ImageAugmentOptions& options, Rng& rng);

}  // namespace sdfa
