#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sdfa {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// H×W map of class indices, row-major.
using LabelMap = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when tensor shapes or channel counts do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (the message names the field).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A single C×H×W activation. Row c of `values` is the flattened H·W plane of
/// channel c, so per-channel work maps onto Eigen row operations and 3×3
/// convolutions onto one GEMM.
template <typename Scalar>
struct FeatureMap {
  Matrix<Scalar> values;
  Index height = 0;
  Index width = 0;

  FeatureMap() = default;
  FeatureMap(Index channels, Index h, Index w)
      : values(Matrix<Scalar>::Zero(channels, h * w)), height(h), width(w) {}
  FeatureMap(Matrix<Scalar> v, Index h, Index w) : values(std::move(v)), height(h), width(w) {
    if (values.cols() != h * w) throw ShapeError("feature map: column count must equal H*W");
  }

  Index channels() const { return values.rows(); }
  Index pixels() const { return height * width; }

  Scalar& operator()(Index c, Index y, Index x) { return values(c, y * width + x); }
  Scalar operator()(Index c, Index y, Index x) const { return values(c, y * width + x); }

  bool same_shape(const FeatureMap& other) const {
    return channels() == other.channels() && height == other.height && width == other.width;
  }

  template <typename To>
  FeatureMap<To> cast() const {
    return FeatureMap<To>(values.template cast<To>(), height, width);
  }

  static FeatureMap zeros_like(const FeatureMap& other) {
    return FeatureMap(other.channels(), other.height, other.width);
  }
};

inline std::string shape_string(Index c, Index h, Index w) {
  return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

template <typename Scalar>
std::string shape_string(const FeatureMap<Scalar>& f) {
  return shape_string(f.channels(), f.height, f.width);
}

}  // namespace sdfa
