#include "sdfa/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace sdfa {

namespace {

void check_same_shape(const LabelMap& a, const LabelMap& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("metric: prediction and ground truth differ in size");
}

// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
void squared_edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    auto meet = [&](int p) { return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p)); };
    double s = meet(v[static_cast<std::size_t>(k)]);
    // z[0] is -inf, so this stops at k == 0 at the latest
    while (s <= z[static_cast<std::size_t>(k)]) s = meet(v[static_cast<std::size_t>(--k)]);
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[q] = double(q - p) * (q - p) + f[p];
  }
}

}  // namespace

double dsc(const LabelMap& pred, const LabelMap& gt, int cls) {
  check_same_shape(pred, gt);
  const auto c = static_cast<std::uint8_t>(cls);
  long p = 0, g = 0, both = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool in_p = pred.data()[i] == c, in_g = gt.data()[i] == c;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& mask, int cls) {
  const auto c = static_cast<std::uint8_t>(cls);
  const int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask(y, x) != c) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
      if (edge || mask(y - 1, x) != c || mask(y + 1, x) != c || mask(y, x - 1) != c || mask(y, x + 1) != c) {
        out.emplace_back(y, x);
      }
    }
  }
  return out;
}

Eigen::MatrixXd distance_to_sites(const std::vector<std::pair<int, int>>& sites, int height, int width) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(height, width, kInf);
  for (const auto& [y, x] : sites) f(y, x) = 0.0;

  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> col_in(static_cast<std::size_t>(height)), col_out(static_cast<std::size_t>(height));
  for (int x = 0; x < width; ++x) {
    for (int y = 0; y < height; ++y) col_in[static_cast<std::size_t>(y)] = f(y, x);
    squared_edt_1d(col_in.data(), col_out.data(), height, v, z);
    for (int y = 0; y < height; ++y) f(y, x) = col_out[static_cast<std::size_t>(y)];
  }
  std::vector<double> row_out(static_cast<std::size_t>(width));
  Eigen::MatrixXd out(height, width);
  for (int y = 0; y < height; ++y) {
    squared_edt_1d(f.row(y).data(), row_out.data(), width, v, z);
    for (int x = 0; x < width; ++x) out(y, x) = std::sqrt(row_out[static_cast<std::size_t>(x)]);
  }
  return out;
}

double asd(const LabelMap& pred, const LabelMap& gt, int cls) {
  check_same_shape(pred, gt);
  const int h = static_cast<int>(pred.rows()), w = static_cast<int>(pred.cols());
  const auto bp = boundary_pixels(pred, cls);
  const auto bg = boundary_pixels(gt, cls);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return std::sqrt(double(h) * h + double(w) * w);
  const Eigen::MatrixXd to_g = distance_to_sites(bg, h, w);
  const Eigen::MatrixXd to_p = distance_to_sites(bp, h, w);
  double sum = 0.0;
  for (const auto& [y, x] : bp) sum += to_g(y, x);
  for (const auto& [y, x] : bg) sum += to_p(y, x);
  return sum / static_cast<double>(bp.size() + bg.size());
}

EvalResult evaluate_masks(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes) {
  if (preds.size() != gts.size()) throw ShapeError("evaluate_masks: prediction/ground-truth count mismatch");
  if (num_classes < 2) throw ConfigError("evaluate_masks: need at least 2 classes");
  EvalResult r;
  r.samples = preds.size();
  r.per_class_dsc.assign(static_cast<std::size_t>(num_classes - 1), 0.0);
  r.per_class_asd.assign(static_cast<std::size_t>(num_classes - 1), 0.0);
  if (preds.empty()) return r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (int c = 1; c < num_classes; ++c) {
      r.per_class_dsc[static_cast<std::size_t>(c - 1)] += dsc(preds[i], gts[i], c);
      r.per_class_asd[static_cast<std::size_t>(c - 1)] += asd(preds[i], gts[i], c);
    }
  }
  for (std::size_t c = 0; c < r.per_class_dsc.size(); ++c) {
    r.per_class_dsc[c] /= static_cast<double>(preds.size());
    r.per_class_asd[c] /= static_cast<double>(preds.size());
    r.mean_dsc += r.per_class_dsc[c];
    r.mean_asd += r.per_class_asd[c];
  }
  r.mean_dsc /= static_cast<double>(r.per_class_dsc.size());
  r.mean_asd /= static_cast<double>(r.per_class_asd.size());
  return r;
}

}  // namespace sdfa
