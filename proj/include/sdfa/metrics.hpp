#pragma once

#include <span>
#include <utility>
#include <vector>

#include "sdfa/tensor.hpp"

namespace sdfa {

/// 2|P∩G| / (|P|+|G|) for one class; 1.0 when both are empty.
double dsc(const LabelMap& pred, const LabelMap& gt, int cls);

/// Foreground pixels of `cls` with a 4-neighbour outside the class or on the
/// image edge, as (row, col).
std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& mask, int cls);

/// Exact Euclidean distance from every pixel to the nearest site (H×W, row-major).
Eigen::MatrixXd distance_to_sites(const std::vector<std::pair<int, int>>& sites, int height, int width);

/// Average surface distance in pixels: pooled mean of nearest-boundary distances
/// in both directions. Both empty → 0; exactly one empty → image diagonal.
double asd(const LabelMap& pred, const LabelMap& gt, int cls);

struct EvalResult {
  std::vector<double> per_class_dsc;  // foreground classes 1..K-1
  std::vector<double> per_class_asd;
  double mean_dsc = 0.0;
  double mean_asd = 0.0;
  std::size_t samples = 0;
};

/// Per-sample metrics averaged over samples, then over foreground classes.
EvalResult evaluate_masks(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes);

template <typename Scalar>
LabelMap argmax_labels(const FeatureMap<Scalar>& logits) {
  LabelMap out(logits.height, logits.width);
  for (Index j = 0; j < logits.pixels(); ++j) {
    Index best = 0;
    logits.values.col(j).maxCoeff(&best);
    out.data()[j] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace sdfa
