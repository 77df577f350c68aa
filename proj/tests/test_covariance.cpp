#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "sdfa/covariance.hpp"
#include "test_util.hpp"

using namespace sdfa;
using sdfa::testing::random_map;

namespace {

DomainStats stats_of(int id, const std::vector<Eigen::VectorXd>& vs, std::size_t cap = 256) {
  DomainStats s(id, cap);
  update_stats(s, vs);
  return s;
}

std::vector<Eigen::VectorXd> random_vectors(int n, int c, Rng& rng) {
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < n; ++i) out.push_back(standard_normal(c, rng));
  return out;
}

// Eq. 3 evaluated entry by entry over an explicit pairing
Eigen::MatrixXd loop_cross_cov(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b,
                               const Pairing& pairing) {
  const int c = static_cast<int>(a[0].size());
  std::vector<double> ma(c, 0.0), mb(c, 0.0);
  for (const auto& v : a)
    for (int k = 0; k < c; ++k) ma[k] += v[k] / a.size();
  for (const auto& v : b)
    for (int k = 0; k < c; ++k) mb[k] += v[k] / b.size();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c, c);
  for (int r = 0; r < c; ++r)
    for (int q = 0; q < c; ++q) {
      double sum = 0.0;
      for (const auto& [i, j] : pairing) sum += (a[i][r] - ma[r]) * (b[j][q] - mb[q]);
      out(r, q) = sum / pairing.size();
    }
  return out;
}

}  // namespace

TEST_CASE("pool_features") {
  FeatureMap<double> z(2, 3, 3);
  z.values.setConstant(3.0);
  CHECK(pool_features(z) == Eigen::Vector2d(3.0, 3.0));

  FeatureMap<double> one(1, 2, 2);
  one.values << 1, 2, 3, 4;
  CHECK(pool_features(one)[0] == 2.5);

  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto r = random_map(5, 3, 4, rng);
    const auto p = pool_features(r);
    for (Index c = 0; c < 5; ++c) {
      double s = 0.0;
      for (Index y = 0; y < 3; ++y)
        for (Index x = 0; x < 4; ++x) s += r(c, y, x);
      CHECK(std::abs(p[c] - s / 12.0) < 1e-12);
    }
  }
}

TEST_CASE("update_stats") {
  const Eigen::Vector2d v(1.0, -2.0);
  DomainStats s(0, 4);
  update_stats(s, v);
  CHECK(s.running_mean == v);
  CHECK(s.count == 1);

  DomainStats two(0, 2);
  const Eigen::Vector2d v1(1, 1), v2(2, 4), v3(6, 0);
  update_stats(two, v1);
  update_stats(two, v2);
  update_stats(two, v3);
  REQUIRE(two.size() == 2);
  CHECK(two.buffer[0] == v2);
  CHECK(two.buffer[1] == v3);
  CHECK(two.running_mean == (v2 + v3) / 2);
  CHECK(two.count == 3);

  Rng rng(4);
  DomainStats ring(0, 64);
  const auto stream = random_vectors(100, 6, rng);
  for (const auto& x : stream) update_stats(ring, x);
  Eigen::VectorXd brute = Eigen::VectorXd::Zero(6);
  for (int i = 36; i < 100; ++i) brute += stream[i];
  brute /= 64.0;
  CHECK((ring.running_mean - brute).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(update_stats(ring, Eigen::VectorXd::Zero(5)), ShapeError);
}

TEST_CASE("pair_covariance examples") {
  Rng rng(2);
  const auto zeros = stats_of(0, {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()});
  CHECK(pair_covariance(zeros, zeros, rng).isZero(0.0));

  const auto a = stats_of(0, {Eigen::Vector2d(1, 0), Eigen::Vector2d(-1, 0)});
  const auto b = stats_of(1, {Eigen::Vector2d(0, 1), Eigen::Vector2d(0, -1)});
  Eigen::Matrix2d expect;
  expect << 0, 1, 0, 0;
  CHECK(cross_covariance(a, b, {{0, 0}, {1, 1}}) == expect);

  DomainStats empty(2, 8);
  CHECK_THROWS_AS(pair_covariance(a, empty, rng), InsufficientStatistics);
  try {
    pair_covariance(empty, a, rng);
  } catch (const InsufficientStatistics& e) {
    CHECK(std::string(e.what()).find("insufficient domain statistics") != std::string::npos);
  }
}

TEST_CASE("cross_covariance equals a loop evaluation") {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const auto va = random_vectors(5 + t % 7, 4, rng), vb = random_vectors(3 + t % 5, 4, rng);
    const auto pairing = random_pairing(va.size(), vb.size(), rng);
    const auto got = cross_covariance(stats_of(0, va), stats_of(1, vb), pairing);
    CHECK((got - loop_cross_cov(va, vb, pairing)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("random_pairing draws without replacement") {
  Rng rng(3);
  const auto p = random_pairing(10, 6, rng);
  REQUIRE(p.size() == 6);
  std::set<std::size_t> left, right;
  for (auto [i, j] : p) {
    CHECK(i < 10);
    CHECK(j < 6);
    left.insert(i);
    right.insert(j);
  }
  CHECK(left.size() == 6);
  CHECK(right.size() == 6);
}

TEST_CASE("independent buffers give a near-zero cross covariance") {
  Rng rng(21);
  const auto a = stats_of(0, random_vectors(10000, 4, rng), 10000);
  const auto b = stats_of(1, random_vectors(10000, 4, rng), 10000);
  CHECK(pair_covariance(a, b, rng).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("psd_project examples") {
  const auto id = psd_project(Eigen::Matrix3d::Identity());
  CHECK((id.sigma_psd - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((id.chol - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::Matrix2d raw;
  raw << 0, 1, 0, 0;
  const auto p = psd_project(raw);
  // symmetric part has eigenpairs ±0.5 along (1,1)/√2 and (1,−1)/√2
  Eigen::Vector2d u(1, 1), v(1, -1);
  u /= std::sqrt(2.0);
  v /= std::sqrt(2.0);
  const Eigen::Matrix2d expect = 0.5 * u * u.transpose() + kEigenFloor * v * v.transpose();
  CHECK((p.sigma_psd - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(p.sigma_psd(0, 0) - 0.25) < 1e-5);
  CHECK(std::abs(p.sigma_psd(0, 1) - 0.25) < 1e-5);

  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 5);
    const Eigen::MatrixXd spd = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(5, 5);
    CHECK((psd_project(spd).sigma_psd - spd).cwiseAbs().maxCoeff() < 1e-10);
  }

  Eigen::Matrix2d bad = Eigen::Matrix2d::Identity();
  bad(0, 1) = std::nan("");
  CHECK_THROWS(psd_project(bad));
}

TEST_CASE("psd_project properties on arbitrary input") {
  Rng rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const int c = 2 + t % 7;
    Eigen::MatrixXd m(c, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    if (t % 3 == 1) m = m - m.transpose().eval();                    // antisymmetric
    if (t % 3 == 2) m = m.col(0) * m.row(1) * 3.0;                   // rank one
    const auto p = psd_project(m);
    CHECK((p.sigma_psd - p.sigma_psd.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(p.sigma_psd);
    CHECK(eig.eigenvalues().minCoeff() >= kEigenFloor - 1e-9);
    CHECK((p.chol * p.chol.transpose() - p.sigma_psd).norm() < 1e-8);
    CHECK(p.chol.isLowerTriangular());
  }
}

TEST_CASE("draw_noise") {
  Rng rng(8);
  CHECK(draw_noise(Eigen::MatrixXd::Zero(3, 3), rng).isZero(0.0));

  Rng a(42), b(42);
  CHECK(draw_noise(Eigen::MatrixXd::Identity(4, 4), a) == standard_normal(4, b));
}

TEST_CASE("draw_noise reproduces its covariance") {
  Eigen::Matrix4d sigma;
  sigma << 1.0, 0.3, -0.2, 0.1,  //
      0.3, 0.8, 0.25, 0.0,       //
      -0.2, 0.25, 0.6, -0.15,    //
      0.1, 0.0, -0.15, 0.5;
  const auto proj = psd_project(sigma);
  Rng rng(1234);
  const int n = 200000;
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d second = Eigen::Matrix4d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector4d x = draw_noise(proj.chol, rng);
    mean += x;
    second += x * x.transpose();
  }
  mean /= n;
  const Eigen::Matrix4d cov = second / n - mean * mean.transpose();
  CHECK(mean.cwiseAbs().maxCoeff() < 0.01);
  CHECK((cov - proj.sigma_psd).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("pick_domain_pair") {
  Rng rng(10);
  const std::vector<int> two = {1, 2};
  for (int i = 0; i < 100; ++i) CHECK(pick_domain_pair(1, two, rng) == std::make_pair(1, 2));

  const std::vector<int> three = {1, 2, 3};
  std::map<int, int> freq;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) {
    const auto [self, other] = pick_domain_pair(1, three, rng);
    CHECK(self == 1);
    ++freq[other];
  }
  CHECK(freq.count(1) == 0);
  CHECK(std::abs(freq[2] / double(draws) - 0.5) <= 0.02);
  CHECK(std::abs(freq[3] / double(draws) - 0.5) <= 0.02);

  const std::vector<int> one = {1};
  CHECK_THROWS(pick_domain_pair(1, one, rng));
}

TEST_CASE("covariance bank warm-up, refresh and fallback") {
  CovarianceBank bank({0, 1, 2}, 3, {16, 50, 8});
  Rng rng(77), rng_ref(77);
  CHECK_FALSE(bank.warm());
  CHECK_FALSE(bank.maybe_refresh(0, rng));
  // cold: plain N(0, I)
  CHECK(bank.sample_noise(0, rng) == standard_normal(3, rng_ref));

  Rng data(3);
  for (int i = 0; i < 8; ++i) {
    bank.update(0, standard_normal(3, data));
    bank.update(1, standard_normal(3, data));
  }
  CHECK_FALSE(bank.warm());  // domain 2 still empty
  for (int i = 0; i < 7; ++i) bank.update(2, standard_normal(3, data));
  CHECK_FALSE(bank.warm());
  bank.update(2, standard_normal(3, data));
  CHECK(bank.warm());

  CHECK(bank.maybe_refresh(10, rng));
  CHECK(bank.has_covariances());
  const auto cached = bank.pair(0, 1).sigma_raw;
  CHECK(bank.pair(1, 0).sigma_raw == cached);
  CHECK_FALSE(bank.maybe_refresh(59, rng));
  for (int i = 0; i < 5; ++i) bank.update(0, standard_normal(3, data) * 4.0);
  CHECK(bank.maybe_refresh(60, rng));
  CHECK(bank.pair(0, 1).sigma_raw != cached);

  for (int t = 0; t < 10; ++t) {
    const auto xi = bank.sample_noise(1, rng);
    CHECK(xi.size() == 3);
    CHECK(xi.allFinite());
  }
  CHECK_THROWS(bank.update(5, Eigen::VectorXd::Zero(3)));
  CHECK_THROWS_AS(bank.update(0, Eigen::VectorXd::Zero(4)), ShapeError);
}

TEST_CASE("a single source domain never leaves the fallback") {
  CovarianceBank bank({4}, 2, {});
  Rng rng(1);
  for (int i = 0; i < 20; ++i) bank.update(4, standard_normal(2, rng));
  CHECK_FALSE(bank.warm());
  CHECK_FALSE(bank.maybe_refresh(100, rng));
  CHECK(bank.sample_noise(4, rng).size() == 2);
}
