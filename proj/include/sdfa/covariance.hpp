#pragma once

#include <cstddef>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sdfa/random.hpp"
#include "sdfa/tensor.hpp"

namespace sdfa {

/// Eigenvalue floor applied when projecting a covariance onto the PSD cone.
inline constexpr double kEigenFloor = 1e-6;

class InsufficientStatistics : public std::runtime_error {
 public:
  InsufficientStatistics() : std::runtime_error("insufficient domain statistics") {}
  using std::runtime_error::runtime_error;
};

/// Spatial mean of every channel: one C-vector per feature map.
template <typename Scalar>
Eigen::VectorXd pool_features(const FeatureMap<Scalar>& z) {
  return z.values.template cast<double>().rowwise().mean();
}

/// Ring buffer of pooled channel vectors for one source domain.
struct DomainStats {
  int domain_id = 0;
  std::size_t capacity = 256;
  std::deque<Eigen::VectorXd> buffer;
  Eigen::VectorXd running_mean;
  long count = 0;

  DomainStats() = default;
  DomainStats(int id, std::size_t cap) : domain_id(id), capacity(cap) {
    if (cap == 0) throw ConfigError("domain stats: capacity must be positive");
  }

  std::size_t size() const { return buffer.size(); }
  Eigen::Index channels() const { return running_mean.size(); }
};

/// Appends vectors (evicting the oldest beyond capacity) and recomputes the
/// exact mean of what remains in the buffer.
void update_stats(DomainStats& stats, std::span<const Eigen::VectorXd> pooled);
inline void update_stats(DomainStats& stats, const Eigen::VectorXd& pooled) {
  update_stats(stats, std::span<const Eigen::VectorXd>(&pooled, 1));
}

struct PairCovariance {
  Eigen::MatrixXd sigma_raw;
  Eigen::MatrixXd sigma_psd;
  Eigen::MatrixXd chol;  // lower triangular, chol·cholᵀ = sigma_psd
};

using Pairing = std::vector<std::pair<std::size_t, std::size_t>>;

/// min(n_i, n_j) index pairs drawn without replacement from both buffers.
Pairing random_pairing(std::size_t n_i, std::size_t n_j, Rng& rng);

/// (1/m) Σ_p (u_p − ū_i)(v_p − ū_j)ᵀ over an explicit pairing, with ū the
/// full-buffer means.
Eigen::MatrixXd cross_covariance(const DomainStats& stats_i, const DomainStats& stats_j, const Pairing& pairing);

/// Raw inter-domain covariance under a fresh random pairing.
Eigen::MatrixXd pair_covariance(const DomainStats& stats_i, const DomainStats& stats_j, Rng& rng);

struct PsdProjection {
  Eigen::MatrixXd sigma_psd;
  Eigen::MatrixXd chol;
};

/// Symmetrize, clamp eigenvalues at `floor`, rebuild, factor.
PsdProjection psd_project(const Eigen::MatrixXd& sigma_raw, double floor = kEigenFloor);

/// ξ = chol · u, u ~ N(0, I).
Eigen::VectorXd draw_noise(const Eigen::MatrixXd& chol, Rng& rng);

/// Pairs `current` with another member of `available`, chosen uniformly.
std::pair<int, int> pick_domain_pair(int current, std::span<const int> available, Rng& rng);

/// Per-domain statistics plus cached pairwise covariances for the intensity
/// sampler. Until every source domain holds `warmup_min` vectors the sampler
/// falls back to ξ ~ N(0, I).
class CovarianceBank {
 public:
  struct Options {
    std::size_t capacity = 256;
    long refresh_interval = 50;
    std::size_t warmup_min = 8;
  };

  CovarianceBank(std::vector<int> source_domains, Eigen::Index channels, Options options);

  void update(int domain, const Eigen::VectorXd& pooled);
  bool warm() const;

  /// Recomputes every pair covariance when warm and either nothing is cached
  /// or `refresh_interval` steps have elapsed since the last refresh.
  bool maybe_refresh(long step, Rng& rng);
  void refresh(long step, Rng& rng);

  /// Draws ξ for a feature from `domain`: picks a partner domain, returns a draw
  /// from the cached pair covariance, or N(0, I) while cold.
  Eigen::VectorXd sample_noise(int domain, Rng& rng) const;

  bool has_covariances() const { return !cache_.empty(); }
  const PairCovariance& pair(int a, int b) const;
  const DomainStats& stats(int domain) const;
  const std::vector<int>& domains() const { return domains_; }
  Eigen::Index channels() const { return channels_; }
  const Options& options() const { return options_; }

 private:
  std::vector<int> domains_;
  Eigen::Index channels_;
  Options options_;
  std::map<int, DomainStats> stats_;
  std::map<std::pair<int, int>, PairCovariance> cache_;
  long last_refresh_ = 0;
};

}  // namespace sdfa
