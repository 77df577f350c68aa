#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "sdfa/layers.hpp"
#include "sdfa/random.hpp"

namespace sdfa::testing {

/// ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)
template <typename A, typename B>
double rel_error(const A& a, const B& b, double floor = 1e-8) {
  const double diff = (a - b).cwiseAbs().maxCoeff();
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return diff / scale;
}

/// Central differences of `f` with respect to every entry of `p`.
inline Matrix<double> numeric_grad(Parameter<double>& p, const std::function<double()>& f, double h = 1e-6) {
  Matrix<double> g(p.value.rows(), p.value.cols());
  for (Index i = 0; i < p.value.size(); ++i) {
    double& x = p.value.data()[i];
    const double keep = x;
    x = keep + h;
    const double up = f();
    x = keep - h;
    const double down = f();
    x = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

template <typename M>
M numeric_grad(M& x, const std::function<double()>& f, double h = 1e-6) {
  M g = M::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

inline FeatureMap<double> random_map(Index c, Index h, Index w, Rng& rng, double scale = 1.0) {
  FeatureMap<double> z(c, h, w);
  std::normal_distribution<double> n(0.0, scale);
  for (Index i = 0; i < z.values.size(); ++i) z.values.data()[i] = n(rng);
  return z;
}

inline Vector<double> random_vector(Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

}  // namespace sdfa::testing
