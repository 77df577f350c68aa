#include "sdfa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "sdfa/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sdfa {

void SyntheticDomainSpec::validate() const {
  if (name.empty()) throw ConfigError("name: must be non-empty");
  if (name.find('/') != std::string::npos) throw ConfigError("name: must not contain '/'");
  if (!(contrast_gain > 0.0)) throw ConfigError("contrast_gain: must be > 0");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std: must be >= 0");
  if (!(texture_freq >= 0.0)) throw ConfigError("texture_freq: must be >= 0");
  if (!std::isfinite(intensity_bias)) throw ConfigError("intensity_bias: must be finite");
  if (blob_min < 1 || blob_max < blob_min) throw ConfigError("blob_count: need 1 <= min <= max");
}

json to_json(const SyntheticDomainSpec& spec) {
  return json{{"name", spec.name},
              {"intensity_bias", spec.intensity_bias},
              {"contrast_gain", spec.contrast_gain},
              {"noise_std", spec.noise_std},
              {"texture_freq", spec.texture_freq},
              {"blob_count", {spec.blob_min, spec.blob_max}},
              {"seed", spec.seed}};
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(key) + ": wrong type");
  }
}

}  // namespace

SyntheticDomainSpec domain_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("domain spec: expected an object");
  static const std::set<std::string> known{"name",        "intensity_bias", "contrast_gain", "noise_std",
                                           "texture_freq", "blob_count",     "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(key + ": unknown field");
  }
  SyntheticDomainSpec spec;
  read_field(j, "name", spec.name);
  read_field(j, "intensity_bias", spec.intensity_bias);
  read_field(j, "contrast_gain", spec.contrast_gain);
  read_field(j, "noise_std", spec.noise_std);
  read_field(j, "texture_freq", spec.texture_freq);
  read_field(j, "seed", spec.seed);
  if (j.contains("blob_count")) {
    const auto& b = j.at("blob_count");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number_integer() || !b[1].is_number_integer()) {
      throw ConfigError("blob_count: expected [min, max]");
    }
    spec.blob_min = b[0].get<int>();
    spec.blob_max = b[1].get<int>();
  }
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(spec.name + "." + e.what());
  }
  return spec;
}

std::vector<SyntheticDomainSpec> domain_specs_from_json(const json& j) {
  const json* list = &j;
  if (j.is_object()) {
    if (!j.contains("domains")) throw ConfigError("domains: missing");
    list = &j.at("domains");
  }
  if (!list->is_array() || list->empty()) throw ConfigError("domains: expected a non-empty array");
  std::vector<SyntheticDomainSpec> specs;
  std::set<std::string> names;
  for (const auto& item : *list) {
    specs.push_back(domain_spec_from_json(item));
    if (!names.insert(specs.back().name).second) throw ConfigError("name: duplicate domain name " + specs.back().name);
  }
  return specs;
}

// ---------------------------------------------------------------------------

double Blob::rho(double y, double x) const {
  const double dy = y - center_y, dx = x - center_x;
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  return std::sqrt((u / radius_x) * (u / radius_x) + (v / radius_y) * (v / radius_y));
}

std::vector<Blob> draw_blobs(Rng& rng, int height, int width, int blob_min, int blob_max) {
  const double extent = std::min(height, width);
  std::uniform_int_distribution<int> count(blob_min, blob_max);
  std::uniform_real_distribution<double> radius(kBlobMinRadius * extent, kBlobMaxRadius * extent);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Blob> blobs(static_cast<std::size_t>(count(rng)));
  for (auto& b : blobs) {
    b.radius_y = radius(rng);
    b.radius_x = radius(rng);
    b.angle = angle(rng);
    // keep the whole ellipse inside the frame
    const double r = std::max(b.radius_y, b.radius_x);
    b.center_y = r + unit(rng) * (height - 1 - 2 * r);
    b.center_x = r + unit(rng) * (width - 1 - 2 * r);
  }
  return blobs;
}

Eigen::MatrixXf render_shapes(const std::vector<Blob>& blobs, int height, int width) {
  constexpr double kEdgeSoftness = 1.5;  // pixels
  Eigen::MatrixXf out = Eigen::MatrixXf::Zero(height, width);
  for (const auto& b : blobs) {
    const double scale = 0.5 * (b.radius_y + b.radius_x) / kEdgeSoftness;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double v = 1.0 / (1.0 + std::exp(-(1.0 - b.rho(y, x)) * scale));
        out(y, x) = std::max(out(y, x), static_cast<float>(v));
      }
    }
  }
  return out;
}

LabelMap rasterize_mask(const std::vector<Blob>& blobs, int height, int width) {
  LabelMap mask = LabelMap::Zero(height, width);
  for (const auto& b : blobs) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (b.rho(y, x) < 1.0) mask(y, x) = 1;
      }
    }
  }
  return mask;
}

namespace {

std::string zero_pad(int i, int width = 4) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

std::vector<SegmentationSample> generate_domain(const SyntheticDomainSpec& spec, int n, int height, int width,
                                                int domain_id) {
  spec.validate();
  if (n < 1) throw ConfigError("n: must be >= 1");
  if (height < 8 || width < 8) throw ConfigError("size: must be >= 8");
  Rng shape_rng(derive_seed(spec.seed, 0));
  Rng look_rng(derive_seed(spec.seed, 1));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<SegmentationSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto blobs = draw_blobs(shape_rng, height, width, spec.blob_min, spec.blob_max);
    const Eigen::MatrixXf shapes = render_shapes(blobs, height, width);
    const double phase_y = phase(look_rng), phase_x = phase(look_rng);

    SegmentationSample s;
    s.image = FeatureMap<float>(1, height, width);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        double texture = 0.0;
        if (spec.texture_freq > 0.0) {
          texture = kTextureAmplitude * std::sin(2.0 * std::numbers::pi * spec.texture_freq * y / height + phase_y) *
                    std::sin(2.0 * std::numbers::pi * spec.texture_freq * x / width + phase_x);
        }
        const double noise = normal(look_rng);
        double v = spec.contrast_gain * (static_cast<double>(shapes(y, x)) + texture) + spec.intensity_bias;
        if (spec.noise_std > 0.0) v += spec.noise_std * noise;
        s.image(0, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    s.mask = rasterize_mask(blobs, height, width);
    s.domain_id = domain_id;
    s.sample_id = spec.name + "/" + zero_pad(i);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> Dataset::domain_ids() const {
  std::vector<int> ids(domain_names.size());
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

int Dataset::resolve_domain(const std::string& key) const {
  for (std::size_t i = 0; i < domain_names.size(); ++i) {
    if (domain_names[i] == key) return static_cast<int>(i);
  }
  try {
    std::size_t used = 0;
    const int id = std::stoi(key, &used);
    if (used == key.size() && id >= 0 && id < static_cast<int>(domain_names.size())) return id;
  } catch (const std::exception&) {
  }
  throw ConfigError("holdout: unknown domain '" + key + "'");
}

Dataset generate_dataset(const std::vector<SyntheticDomainSpec>& specs, int n, int height, int width) {
  Dataset ds;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    ds.domain_names.push_back(specs[d].name);
    auto samples = generate_domain(specs[d], n, height, width, static_cast<int>(d));
    std::move(samples.begin(), samples.end(), std::back_inserter(ds.samples));
  }
  return ds;
}

namespace {

std::string file_stem_of(const std::string& sample_id) {
  const auto slash = sample_id.rfind('/');
  return slash == std::string::npos ? sample_id : sample_id.substr(slash + 1);
}

Image8 to_image8(const FeatureMap<float>& image) {
  Image8 img;
  img.height = static_cast<int>(image.height);
  img.width = static_cast<int>(image.width);
  img.channels = static_cast<int>(image.channels());
  img.pixels.resize(static_cast<std::size_t>(img.height * img.width * img.channels));
  for (Index p = 0; p < image.pixels(); ++p) {
    for (Index c = 0; c < image.channels(); ++c) {
      const double v = std::clamp(static_cast<double>(image.values(c, p)), 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(p * image.channels() + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

}  // namespace

void write_dataset(const fs::path& root, const Dataset& dataset, const std::vector<SyntheticDomainSpec>& specs) {
  fs::create_directories(root);
  json manifest{{"format", "sdfa-dataset"},
                {"version", 1},
                {"num_classes", dataset.num_classes},
                {"in_channels", dataset.in_channels},
                {"domains", json::array()}};
  for (std::size_t d = 0; d < dataset.domain_names.size(); ++d) {
    const fs::path dir = root / dataset.domain_names[d];
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    int count = 0;
    for (const auto& s : dataset.samples) {
      if (s.domain_id != static_cast<int>(d)) continue;
      const std::string stem = file_stem_of(s.sample_id);
      write_png(dir / "images" / (stem + ".png"), to_image8(s.image));
      Image8 mask;
      mask.height = static_cast<int>(s.mask.rows());
      mask.width = static_cast<int>(s.mask.cols());
      mask.pixels.assign(s.mask.data(), s.mask.data() + s.mask.size());
      write_png(dir / "masks" / (stem + ".png"), mask);
      ++count;
    }
    json entry{{"name", dataset.domain_names[d]}, {"count", count}};
    if (d < specs.size()) entry["spec"] = to_json(specs[d]);
    manifest["domains"].push_back(entry);
  }
  std::ofstream(root / "manifest.json") << manifest.dump(2) << "\n";
}

namespace {

std::vector<std::string> sorted_pngs(const fs::path& dir) {
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

}  // namespace

Dataset load_directory(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  Dataset ds;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::is_directory(entry.path() / "images")) names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no domain folders with images/ under " + root.string());

  int max_label = 0;
  int in_channels = -1;
  for (std::size_t d = 0; d < names.size(); ++d) {
    const fs::path dir = root / names[d];
    if (!fs::is_directory(dir / "masks")) throw DataError(names[d] + ": missing masks/ folder");
    const auto images = sorted_pngs(dir / "images");
    const auto masks = sorted_pngs(dir / "masks");
    const std::set<std::string> mask_set(masks.begin(), masks.end());
    const std::set<std::string> image_set(images.begin(), images.end());
    for (const auto& stem : images) {
      if (!mask_set.count(stem)) throw DataError(names[d] + ": image " + stem + ".png has no mask");
    }
    for (const auto& stem : masks) {
      if (!image_set.count(stem)) throw DataError(names[d] + ": mask " + stem + ".png has no image");
    }
    int dom_h = -1, dom_w = -1;
    for (const auto& stem : images) {
      const Image8 img = read_png(dir / "images" / (stem + ".png"));
      const Image8 msk = read_png(dir / "masks" / (stem + ".png"));
      if (msk.channels != 1) throw DataError(names[d] + ": mask " + stem + ".png must be single-channel");
      if (msk.height != img.height || msk.width != img.width) {
        throw DataError(names[d] + ": image and mask sizes differ for " + stem);
      }
      if (dom_h < 0) {
        dom_h = img.height;
        dom_w = img.width;
      } else if (img.height != dom_h || img.width != dom_w) {
        throw DataError(names[d] + ": inconsistent image size at " + stem + ".png");
      }
      if (in_channels < 0) in_channels = img.channels;
      if (img.channels != in_channels) throw DataError(names[d] + ": inconsistent channel count at " + stem + ".png");

      SegmentationSample s;
      s.image = FeatureMap<float>(img.channels, img.height, img.width);
      for (Index p = 0; p < s.image.pixels(); ++p) {
        for (Index c = 0; c < img.channels; ++c) {
          s.image.values(c, p) = static_cast<float>(img.pixels[static_cast<std::size_t>(p * img.channels + c)]) / 255.0f;
        }
      }
      s.mask = LabelMap(img.height, img.width);
      std::copy(msk.pixels.begin(), msk.pixels.end(), s.mask.data());
      max_label = std::max<int>(max_label, s.mask.maxCoeff());
      s.domain_id = static_cast<int>(d);
      s.sample_id = names[d] + "/" + stem;
      ds.samples.push_back(std::move(s));
    }
  }
  ds.domain_names = names;
  ds.in_channels = std::max(in_channels, 1);
  ds.num_classes = std::max(2, max_label + 1);
  if (fs::exists(root / "manifest.json")) {
    try {
      const json manifest = json::parse(std::ifstream(root / "manifest.json"));
      ds.num_classes = std::max(ds.num_classes, manifest.value("num_classes", 2));
    } catch (const json::exception& e) {
      throw DataError(std::string("manifest.json: ") + e.what());
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

LodoSplit lodo_split(const std::vector<SegmentationSample>& samples, int held_out_domain, double val_fraction,
                     std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction: must be in [0, 1)");
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < samples.size(); ++i) by_domain[samples[i].domain_id].push_back(i);
  if (!by_domain.count(held_out_domain)) {
    throw ConfigError("holdout: domain " + std::to_string(held_out_domain) + " not present");
  }
  if (by_domain.size() < 2) throw ConfigError("holdout: need at least 2 domains");

  LodoSplit split;
  split.held_out_domain = held_out_domain;
  Rng rng(seed);
  for (auto& [domain, idx] : by_domain) {
    if (domain == held_out_domain) {
      for (auto i : idx) split.test.push_back(samples[i]);
      continue;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(idx.size())));
    if (n_val == 0 && idx.size() >= 2 && val_fraction > 0.0) n_val = 1;
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_val ? split.val : split.train).push_back(samples[idx[k]]);
  }
  return split;
}

// ---------------------------------------------------------------------------

namespace {

float bilinear(const float* plane, Index h, Index w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const Index y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return static_cast<float>((1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
                            fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]));
}

}  // namespace

SegmentationSample augment_image(const SegmentationSample& sample, const ImageAugmentOptions& options, Rng& rng) {
  if (!options.enabled) return sample;
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  SegmentationSample out = sample;
  const Index h = sample.image.height, w = sample.image.width;

  // elastic: coarse random displacement grid, bilinearly upsampled
  const int g = std::max(1, options.elastic_grid);
  Eigen::MatrixXd grid_y(g + 1, g + 1), grid_x(g + 1, g + 1);
  for (Index i = 0; i < grid_y.size(); ++i) {
    grid_y.data()[i] = options.elastic_alpha * uni(rng);
    grid_x.data()[i] = options.elastic_alpha * uni(rng);
  }
  auto field = [&](const Eigen::MatrixXd& grid, double y, double x) {
    const double gy = y / std::max<double>(1, h - 1) * g, gx = x / std::max<double>(1, w - 1) * g;
    const int iy = std::min(static_cast<int>(gy), g - 1), ix = std::min(static_cast<int>(gx), g - 1);
    const double fy = gy - iy, fx = gx - ix;
    return (1 - fy) * ((1 - fx) * grid(iy, ix) + fx * grid(iy, ix + 1)) +
           fy * ((1 - fx) * grid(iy + 1, ix) + fx * grid(iy + 1, ix + 1));
  };
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double sy = y + field(grid_y, y, x), sx = x + field(grid_x, y, x);
      for (Index c = 0; c < sample.image.channels(); ++c) {
        out.image(c, y, x) = bilinear(sample.image.values.row(c).data(), h, w, sy, sx);
      }
      const Index ny = std::clamp<Index>(std::lround(sy), 0, h - 1), nx = std::clamp<Index>(std::lround(sx), 0, w - 1);
      out.mask(y, x) = sample.mask(ny, nx);
    }
  }

  const double shift = options.brightness * uni(rng);
  const double gain = 1.0 + options.contrast * uni(rng);
  for (Index c = 0; c < out.image.channels(); ++c) {
    const double mean = out.image.values.row(c).mean();
    for (Index p = 0; p < out.image.pixels(); ++p) {
      const double v = (out.image.values(c, p) - mean) * gain + mean + shift + options.noise_std * normal(rng);
      out.image.values(c, p) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace sdfa
