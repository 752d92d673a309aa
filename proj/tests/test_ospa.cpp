#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "pfloc/ospa.hpp"

using namespace pfloc;
using Catch::Approx;

namespace {

std::vector<Vec3> random_set(std::mt19937_64& rng, int n, double extent = 100.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.push_back(Vec3(u(rng), u(rng), u(rng)));
  return out;
}

// exhaustive assignment search, valid for small sets only
double ospa_brute(const std::vector<Vec3>& x, const std::vector<Vec3>& y,
                  double cutoff, double order) {
  if (x.empty() && y.empty()) return 0.0;
  const auto& small = x.size() <= y.size() ? x : y;
  const auto& big = x.size() <= y.size() ? y : x;
  const int n = static_cast<int>(small.size());
  const int m = static_cast<int>(big.size());
  if (n == 0) return cutoff;
  std::vector<int> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      s += std::pow(std::min(cutoff, (small[i] - big[idx[i]]).norm()), order);
    best = std::min(best, s);
  } while (std::next_permutation(idx.begin(), idx.end()));
  best += std::pow(cutoff, order) * (m - n);
  return std::pow(best / m, 1.0 / order);
}

}  // namespace

TEST_CASE("assignment solver matches brute force") {
  Eigen::MatrixXd c(3, 3);
  c << 4, 1, 3, 2, 0, 5, 3, 2, 2;
  const auto a = hungarian_assign(c);
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += c(i, a[i]);
  CHECK(s == 5.0);  // 1 + 2 + 2

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::uniform_int_distribution<int> sz(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = sz(rng);
    const int m = n + std::uniform_int_distribution<int>(0, 2)(rng);
    Eigen::MatrixXd cost(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) cost(i, j) = u(rng);
    const auto asg = hungarian_assign(cost);
    REQUIRE(static_cast<int>(asg.size()) == n);
    std::vector<char> seen(m, 0);
    double got = 0.0;
    for (int i = 0; i < n; ++i) {
      REQUIRE(asg[i] >= 0);
      REQUIRE(asg[i] < m);
      REQUIRE(!seen[asg[i]]);
      seen[asg[i]] = 1;
      got += cost(i, asg[i]);
    }
    std::vector<int> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double s2 = 0.0;
      for (int i = 0; i < n; ++i) s2 += cost(i, idx[i]);
      best = std::min(best, s2);
    } while (std::next_permutation(idx.begin(), idx.end()));
    CHECK(got == Approx(best).margin(1e-9));
  }

  CHECK(hungarian_assign(Eigen::MatrixXd(0, 0)).empty());
  CHECK_THROWS_AS(hungarian_assign(Eigen::MatrixXd::Zero(3, 2)), InvalidParam);
}

TEST_CASE("distance basics") {
  const std::vector<Vec3> x = {Vec3(0, 0, 0)};
  const std::vector<Vec3> y = {Vec3(3, 4, 0)};
  CHECK(ospa(x, y, 50.0, 1.0) == Approx(5.0).epsilon(1e-12));
  CHECK(ospa({}, {}, 50.0, 1.0) == 0.0);
  CHECK(ospa({}, y, 50.0, 1.0) == 50.0);
  CHECK(ospa(x, {}, 50.0, 2.0) == 50.0);
  CHECK(ospa(x, x, 50.0, 1.0) == 0.0);

  // distance beyond the cutoff saturates
  const std::vector<Vec3> far = {Vec3(1000, 0, 0)};
  CHECK(ospa(x, far, 50.0, 1.0) == Approx(50.0));

  CHECK_THROWS_AS(ospa(x, y, 0.0, 1.0), InvalidParam);
  CHECK_THROWS_AS(ospa(x, y, 50.0, 0.5), InvalidParam);
}

TEST_CASE("matches the permutation oracle on random small sets") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> sz(0, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = random_set(rng, sz(rng));
    const auto y = random_set(rng, sz(rng));
    const double order = (trial % 2 == 0) ? 1.0 : 2.0;
    const double got = ospa(x, y, 50.0, order);
    const double want = ospa_brute(x, y, 50.0, order);
    CHECK(got == Approx(want).margin(1e-10));
    CHECK(got <= 50.0 + 1e-12);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> sz(0, 4);
  for (int trial = 0; trial < 300; ++trial) {
    const auto x = random_set(rng, sz(rng), 60.0);
    const auto y = random_set(rng, sz(rng), 60.0);
    const auto z = random_set(rng, sz(rng), 60.0);
    const double order = (trial % 2 == 0) ? 1.0 : 2.0;
    CHECK(ospa(x, y, 50.0, order) == Approx(ospa(y, x, 50.0, order)).margin(1e-12));
    CHECK(ospa(x, z, 50.0, order) <=
          ospa(x, y, 50.0, order) + ospa(y, z, 50.0, order) + 1e-9);
    if (!x.empty() || !y.empty()) {
      // identity of indiscernibles, loosely: distinct singletons have distance > 0
      if (x.size() == 1 && y.size() == 1 && (x[0] - y[0]).norm() > 1e-9)
        CHECK(ospa(x, y, 50.0, order) > 0.0);
    }
  }
}
