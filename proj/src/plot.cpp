#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sdfa/experiment.hpp"

namespace fs = std::filesystem;

namespace sdfa {

namespace {

const std::array<const char*, 6> kLineColors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string heat_color(double v) {
  // black → purple → orange → pale yellow
  static const std::array<std::array<double, 3>, 4> stops = {{{0, 0, 4}, {120, 28, 109}, {237, 105, 37}, {252, 255, 164}}};
  v = std::clamp(v, 0.0, 1.0) * 3.0;
  const int i = std::min(2, static_cast<int>(v));
  const double t = v - i;
  char buf[8];
  int rgb[3];
  for (int k = 0; k < 3; ++k) rgb[k] = static_cast<int>(std::lround(stops[i][k] + t * (stops[i + 1][k] - stops[i][k])));
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

std::string gray(double v) {
  const int g = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", g, g, g);
  return buf;
}

/// Emits `m` (values in [0,1]) as a grid of cells of size `cell`.
void raster(std::ostream& svg, const Eigen::MatrixXd& m, double x0, double y0, double cell, bool heat) {
  for (Index y = 0; y < m.rows(); ++y) {
    for (Index x = 0; x < m.cols(); ++x) {
      svg << "<rect x=\"" << x0 + x * cell << "\" y=\"" << y0 + y * cell << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"" << (heat ? heat_color(m(y, x)) : gray(m(y, x))) << "\"/>\n";
    }
  }
}

Eigen::MatrixXd normalized(Eigen::MatrixXd m) {
  const double hi = m.maxCoeff();
  if (hi > 0) m /= hi;
  return m;
}

void curve_panel(std::ostream& svg, const PlotInputs& in, double x0, double y0, double w, double h) {
  std::vector<std::vector<StepRecord>> logs;
  for (const auto& dir : in.run_dirs) logs.push_back(read_step_log(dir / "train_log.jsonl"));
  double max_step = 1, max_c = 1;
  for (const auto& log : logs) {
    for (const auto& r : log) {
      max_step = std::max(max_step, static_cast<double>(r.step));
      max_c = std::max(max_c, r.channels_selected);
    }
  }
  max_c = std::ceil(max_c * 1.1);
  svg << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\" font-size=\"14\">(a) channels selected per step</text>\n";
  svg << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << h
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = max_c * t / 4.0, y = y0 + h - h * t / 4.0;
    svg << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << std::lround(v)
        << "</text>\n";
    const double s = max_step * t / 4.0, x = x0 + w * t / 4.0;
    svg << "<text x=\"" << x << "\" y=\"" << y0 + h + 14 << "\" font-size=\"10\" text-anchor=\"middle\">" << std::lround(s)
        << "</text>\n";
  }
  svg << "<text x=\"" << x0 + w / 2 << "\" y=\"" << y0 + h + 30 << "\" font-size=\"11\" text-anchor=\"middle\">step</text>\n";
  for (std::size_t k = 0; k < logs.size(); ++k) {
    const char* color = kLineColors[k % kLineColors.size()];
    svg << "<polyline fill=\"none\" stroke-width=\"1\" stroke=\"" << color << "\" points=\"";
    for (const auto& r : logs[k]) {
      svg << x0 + w * r.step / max_step << "," << y0 + h - h * r.channels_selected / max_c << " ";
    }
    svg << "\"/>\n";
    const std::string label = k < in.labels.size() ? in.labels[k] : in.run_dirs[k].filename().string();
    svg << "<text x=\"" << x0 + w + 10 << "\" y=\"" << y0 + 14 + 16 * k << "\" font-size=\"11\" fill=\"" << color << "\">"
        << label << "</text>\n";
  }
}

/// Feature-space |z̃ − z| (channels × bottleneck pixels) and output-space
/// |softmax(ỹ) − softmax(ŷ)| per sample, each normalized to [0, 1].
double heatmap_panel(std::ostream& svg, const PlotInputs& in, double x0, double y0) {
  if (!in.data) throw ConfigError("plot: a dataset is required with a checkpoint");
  SdfaModel<float> model(checkpoint_backbone_config(in.checkpoint));
  load_checkpoint(in.checkpoint, model);
  Rng rng(derive_seed(in.seed, 40));
  const auto& samples = in.data->samples;
  const int n = std::min<int>(in.samples, static_cast<int>(samples.size()));
  const std::size_t stride = std::max<std::size_t>(1, samples.size() / static_cast<std::size_t>(std::max(n, 1)));
  const double cell = 4.0;
  svg << "<text x=\"" << x0 << "\" y=\"" << y0 - 8
      << "\" font-size=\"14\">(b) image | feature difference |z&#771; - z| (channel x position) | output difference</text>\n";
  double y = y0;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i) * stride];
    const auto enc = model.backbone.encode(s.image);
    const auto dir = select_direction(enc.bottleneck, model.selector);
    const Vector<float> xi = standard_normal(enc.bottleneck.channels(), rng).cast<float>();
    const auto z_aug = apply_augmentation(enc.bottleneck, dir.hard, compose_intensity(xi, model.intensity));
    const auto p_ori = softmax(model.backbone.decode(enc.bottleneck, enc.skips));
    const auto p_aug = softmax(model.backbone.decode(z_aug, enc.skips));

    const Eigen::MatrixXd image = s.image.values.row(0).cast<double>().reshaped<Eigen::RowMajor>(s.image.height, s.image.width);
    const Eigen::MatrixXd feat = normalized((z_aug.values - enc.bottleneck.values).cwiseAbs().cast<double>());
    const Eigen::MatrixXd out = normalized(
        ((p_aug.values - p_ori.values).cwiseAbs().colwise().sum() * 0.5).cast<double>().reshaped<Eigen::RowMajor>(s.image.height, s.image.width));
    double x = x0;
    raster(svg, image, x, y, cell, false);
    x += image.cols() * cell + 12;
    const double fcell = std::max(2.0, cell * image.rows() / std::max<double>(feat.rows(), 1));
    raster(svg, feat, x, y, fcell, true);
    x += feat.cols() * fcell + 12;
    raster(svg, out, x, y, cell, true);
    svg << "<text x=\"" << x + out.cols() * cell + 8 << "\" y=\"" << y + 14 << "\" font-size=\"10\">" << s.sample_id
        << " (" << dir.hard.sum() << " ch)</text>\n";
    y += std::max(image.rows() * cell, feat.rows() * fcell) + 12;
  }
  return y - y0;
}

}  // namespace

void write_plot(const PlotInputs& in, const fs::path& out) {
  if (in.run_dirs.empty()) throw ConfigError("plot: no runs given");
  std::ostringstream body;
  const double left = 60, top = 40, cw = 520, ch = 240;
  curve_panel(body, in, left, top, cw, ch);
  double height = top + ch + 60;
  if (!in.checkpoint.empty()) height += heatmap_panel(body, in, left, height + 20) + 40;
  std::ofstream svg(out);
  if (!svg) throw std::runtime_error("cannot write " + out.string());
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cw + 200 << "\" height=\"" << height
      << "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << body.str() << "</svg>\n";
}

}  // namespace sdfa
