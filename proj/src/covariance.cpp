#include "sdfa/covariance.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace sdfa {

void update_stats(DomainStats& stats, std::span<const Eigen::VectorXd> pooled) {
  for (const auto& v : pooled) {
    if (stats.channels() != 0 && v.size() != stats.channels()) {
      throw ShapeError("update_stats: expected length " + std::to_string(stats.channels()) + ", got " +
                       std::to_string(v.size()));
    }
    if (!v.allFinite()) throw std::invalid_argument("update_stats: non-finite pooled vector");
    stats.buffer.push_back(v);
    if (stats.buffer.size() > stats.capacity) stats.buffer.pop_front();
    ++stats.count;
    if (stats.running_mean.size() == 0) stats.running_mean = Eigen::VectorXd::Zero(v.size());
  }
  if (stats.buffer.empty()) return;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(stats.buffer.front().size());
  for (const auto& v : stats.buffer) sum += v;
  stats.running_mean = sum / static_cast<double>(stats.buffer.size());
}

Pairing random_pairing(std::size_t n_i, std::size_t n_j, Rng& rng) {
  std::vector<std::size_t> a(n_i), b(n_j);
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), std::size_t{0});
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  const std::size_t m = std::min(n_i, n_j);
  Pairing pairing(m);
  for (std::size_t p = 0; p < m; ++p) pairing[p] = {a[p], b[p]};
  return pairing;
}

Eigen::MatrixXd cross_covariance(const DomainStats& stats_i, const DomainStats& stats_j, const Pairing& pairing) {
  if (stats_i.buffer.empty() || stats_j.buffer.empty() || pairing.empty()) throw InsufficientStatistics();
  const Eigen::Index c = stats_i.channels();
  if (stats_j.channels() != c) throw ShapeError("cross_covariance: channel mismatch between domains");
  Eigen::MatrixXd u(c, static_cast<Eigen::Index>(pairing.size()));
  Eigen::MatrixXd v(c, static_cast<Eigen::Index>(pairing.size()));
  for (std::size_t p = 0; p < pairing.size(); ++p) {
    u.col(static_cast<Eigen::Index>(p)) = stats_i.buffer.at(pairing[p].first) - stats_i.running_mean;
    v.col(static_cast<Eigen::Index>(p)) = stats_j.buffer.at(pairing[p].second) - stats_j.running_mean;
  }
  return u * v.transpose() / static_cast<double>(pairing.size());
}

Eigen::MatrixXd pair_covariance(const DomainStats& stats_i, const DomainStats& stats_j, Rng& rng) {
  if (stats_i.buffer.empty() || stats_j.buffer.empty()) throw InsufficientStatistics();
  return cross_covariance(stats_i, stats_j, random_pairing(stats_i.size(), stats_j.size(), rng));
}

PsdProjection psd_project(const Eigen::MatrixXd& sigma_raw, double floor) {
  if (sigma_raw.rows() != sigma_raw.cols()) throw ShapeError("psd_project: matrix must be square");
  if (!sigma_raw.allFinite()) throw std::invalid_argument("psd_project: non-finite input");
  const Eigen::MatrixXd sym = 0.5 * (sigma_raw + sigma_raw.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(floor);
  Eigen::MatrixXd rebuilt = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
  PsdProjection out;
  out.sigma_psd = 0.5 * (rebuilt + rebuilt.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(out.sigma_psd);
  if (llt.info() != Eigen::Success) throw std::runtime_error("psd_project: Cholesky factorization failed");
  out.chol = llt.matrixL();
  return out;
}

Eigen::VectorXd draw_noise(const Eigen::MatrixXd& chol, Rng& rng) {
  return chol.triangularView<Eigen::Lower>() * standard_normal(chol.rows(), rng);
}

std::pair<int, int> pick_domain_pair(int current, std::span<const int> available, Rng& rng) {
  std::vector<int> others;
  for (int d : available) {
    if (d != current) others.push_back(d);
  }
  if (available.size() < 2 || others.empty()) {
    throw InsufficientStatistics("pick_domain_pair: need at least 2 domains with populated statistics");
  }
  std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
  return {current, others[pick(rng)]};
}

CovarianceBank::CovarianceBank(std::vector<int> source_domains, Eigen::Index channels, Options options)
    : domains_(std::move(source_domains)), channels_(channels), options_(options) {
  std::sort(domains_.begin(), domains_.end());
  domains_.erase(std::unique(domains_.begin(), domains_.end()), domains_.end());
  if (options_.refresh_interval < 1) throw ConfigError("cov_refresh must be >= 1");
  for (int d : domains_) stats_.emplace(d, DomainStats(d, options_.capacity));
}

void CovarianceBank::update(int domain, const Eigen::VectorXd& pooled) {
  auto it = stats_.find(domain);
  if (it == stats_.end()) throw std::invalid_argument("covariance bank: unknown domain " + std::to_string(domain));
  if (pooled.size() != channels_) throw ShapeError("covariance bank: pooled vector has wrong length");
  update_stats(it->second, pooled);
}

bool CovarianceBank::warm() const {
  if (domains_.size() < 2) return false;
  return std::all_of(stats_.begin(), stats_.end(),
                     [&](const auto& kv) { return kv.second.size() >= options_.warmup_min; });
}

bool CovarianceBank::maybe_refresh(long step, Rng& rng) {
  if (!warm()) return false;
  if (!cache_.empty() && step - last_refresh_ < options_.refresh_interval) return false;
  refresh(step, rng);
  return true;
}

void CovarianceBank::refresh(long step, Rng& rng) {
  if (!warm()) throw InsufficientStatistics();
  cache_.clear();
  for (std::size_t a = 0; a < domains_.size(); ++a) {
    for (std::size_t b = a + 1; b < domains_.size(); ++b) {
      PairCovariance pc;
      pc.sigma_raw = pair_covariance(stats_.at(domains_[a]), stats_.at(domains_[b]), rng);
      auto proj = psd_project(pc.sigma_raw);
      pc.sigma_psd = std::move(proj.sigma_psd);
      pc.chol = std::move(proj.chol);
      cache_.emplace(std::make_pair(domains_[a], domains_[b]), std::move(pc));
    }
  }
  last_refresh_ = step;
}

Eigen::VectorXd CovarianceBank::sample_noise(int domain, Rng& rng) const {
  if (cache_.empty()) return standard_normal(channels_, rng);
  const auto [self, partner] = pick_domain_pair(domain, domains_, rng);
  return draw_noise(pair(self, partner).chol, rng);
}

const PairCovariance& CovarianceBank::pair(int a, int b) const {
  auto it = cache_.find(std::minmax(a, b));
  if (it == cache_.end()) throw InsufficientStatistics();
  return it->second;
}

const DomainStats& CovarianceBank::stats(int domain) const { return stats_.at(domain); }

}  // namespace sdfa
