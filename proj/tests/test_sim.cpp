#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "pfloc/sim.hpp"

using namespace pfloc;
using Catch::Approx;

TEST_CASE("scenario generation") {
  Roi roi;
  const Scenario sc = generate_scenario(4, roi, 99);
  REQUIRE(sc.receivers.size() == 6);
  CHECK((sc.receivers[0].position - Vec3(1000, 0, 0)).norm() == 0.0);
  CHECK((sc.receivers[1].position - Vec3(-1000, 0, 0)).norm() == 0.0);
  CHECK((sc.receivers[2].position - Vec3(0, 1000, 0)).norm() == 0.0);
  CHECK((sc.receivers[5].position - Vec3(0, 0, -1000)).norm() == 0.0);
  REQUIRE(sc.pairs.size() == 9);
  CHECK(sc.pairs[0].rx_a.id == 1);
  CHECK(sc.pairs[0].rx_b.id == 2);
  CHECK(sc.pairs[8].rx_a.id == 2);
  CHECK(sc.pairs[8].rx_b.id == 6);
  REQUIRE(sc.sources.size() == 4);
  for (const auto& s : sc.sources) CHECK(roi.contains(s));

  const Scenario again = generate_scenario(4, roi, 99);
  for (size_t i = 0; i < sc.sources.size(); ++i)
    CHECK(sc.sources[i] == again.sources[i]);
  const Scenario other = generate_scenario(4, roi, 100);
  CHECK(sc.sources[0] != other.sources[0]);

  CHECK(generate_scenario(0, roi, 1).sources.empty());
  CHECK_THROWS_AS(generate_scenario(-1, roi, 1), InvalidParam);
  CHECK_THROWS_AS(generate_scenario(1, roi, 1, Medium{}, {{1, 1}}), InvalidParam);
  CHECK_THROWS_AS(generate_scenario(1, roi, 1, Medium{}, {{0, 2}}), InvalidParam);

  // off-center box keeps receivers on its faces
  Roi shifted;
  shifted.lo = Vec3(0, 0, 0);
  shifted.hi = Vec3(200, 200, 200);
  const Scenario sc2 = generate_scenario(0, shifted, 5);
  CHECK((sc2.receivers[0].position - Vec3(200, 100, 100)).norm() == 0.0);
  CHECK((sc2.receivers[5].position - Vec3(100, 100, 0)).norm() == 0.0);
}

TEST_CASE("scan simulation limits and moments") {
  Roi roi;
  DaConfig cfg;
  const Scenario sc = generate_scenario(3, roi, 12);
  const SensorPair& pair = sc.pairs[0];
  const double lim = pair.max_tdoa(sc.medium);

  SECTION("noiseless detections reproduce the predictions") {
    Scenario tight = sc;
    tight.medium.sigma_v = 1e-15;
    DaConfig sure;
    sure.p_d = 1.0;
    sure.mu_c = 0.0;
    auto rng = RngPath(1).engine();
    SensorScan scan = simulate_scan(tight, pair, sure, rng);
    REQUIRE(scan.measurements.size() == 3);
    std::vector<double> want;
    for (const auto& s : tight.sources)
      want.push_back(tdoa_predict(s, pair, tight.medium));
    std::sort(want.begin(), want.end());
    std::vector<double> got = scan.measurements;
    std::sort(got.begin(), got.end());
    for (int i = 0; i < 3; ++i) CHECK(got[i] == Approx(want[i]).margin(1e-9));
  }

  SECTION("silent configuration yields empty scans") {
    DaConfig off;
    off.p_d = 1e-300;
    off.mu_c = 0.0;
    auto rng = RngPath(2).engine();
    Scenario none = sc;
    none.sources.clear();
    CHECK(simulate_scan(none, pair, off, rng).measurements.empty());
  }

  SECTION("clutter count is Poisson with the configured mean") {
    Scenario empty = generate_scenario(0, roi, 13);
    DaConfig cl;
    cl.mu_c = 1.0;
    auto rng = RngPath(3).engine();
    double total = 0.0;
    const int reps = 10000;
    for (int i = 0; i < reps; ++i) {
      const SensorScan scan = simulate_scan(empty, pair, cl, rng);
      total += static_cast<double>(scan.measurements.size());
      for (double z : scan.measurements) {
        CHECK(z >= -lim);
        CHECK(z <= lim);
      }
    }
    CHECK(total / reps == Approx(1.0).margin(0.03));
  }

  SECTION("detection count is Binomial(n_t, p_d)") {
    Scenario five = generate_scenario(5, roi, 14);
    DaConfig det;
    det.p_d = 0.7;
    det.mu_c = 0.0;
    auto rng = RngPath(4).engine();
    double total = 0.0;
    const int reps = 10000;
    for (int i = 0; i < reps; ++i)
      total += static_cast<double>(simulate_scan(five, pair, det, rng).measurements.size());
    const double sigma = std::sqrt(5 * 0.7 * 0.3 / reps);
    CHECK(total / reps == Approx(3.5).margin(3 * sigma));
  }

  SECTION("noise near the boundary is clamped to the feasible interval") {
    Scenario edge = generate_scenario(0, roi, 15);
    edge.sources = {Vec3(999.9, 0, 0)};
    edge.medium.sigma_v = 0.01;
    DaConfig sure;
    sure.p_d = 1.0;
    sure.mu_c = 0.0;
    auto rng = RngPath(5).engine();
    for (int i = 0; i < 100; ++i) {
      const SensorScan scan = simulate_scan(edge, edge.pairs[0], sure, rng);
      REQUIRE(scan.measurements.size() == 1);
      CHECK(std::abs(scan.measurements[0]) <= lim);
    }
  }
}

TEST_CASE("box statistics") {
  const BoxStats b = box_stats({5, 1, 3, 2, 4});
  CHECK(b.min == 1.0);
  CHECK(b.q1 == 2.0);
  CHECK(b.median == 3.0);
  CHECK(b.q3 == 4.0);
  CHECK(b.max == 5.0);
  CHECK(b.whisker_lo == 1.0);
  CHECK(b.whisker_hi == 5.0);
  CHECK(b.outliers.empty());

  const BoxStats o = box_stats({1, 2, 3, 4, 100});
  CHECK(o.q3 == 4.0);
  CHECK(o.max == 100.0);
  CHECK(o.whisker_hi == 4.0);
  REQUIRE(o.outliers.size() == 1);
  CHECK(o.outliers[0] == 100.0);

  const BoxStats one = box_stats({7});
  CHECK(one.min == 7.0);
  CHECK(one.median == 7.0);
  CHECK(one.max == 7.0);

  // even count interpolates
  const BoxStats e = box_stats({1, 2, 3, 4});
  CHECK(e.median == 2.5);
  CHECK(e.q1 == 1.75);
  CHECK(e.q3 == 3.25);

  CHECK_THROWS_AS(box_stats({}), InvalidParam);
}

TEST_CASE("monte carlo aggregation is thread-invariant") {
  PipelineConfig cfg;
  cfg.da.p_d = 1.0;
  cfg.da.mu_c = 0.0;
  cfg.da.birth_samples = 500;
  cfg.birth.n_kernels = 20;
  cfg.birth.min_accepted = 300;
  MethodConfig method;
  method.method = Method::Edh;
  method.n_kernels = 20;
  method.legacy_particles = 80;
  method.birth_particles = 30;
  method.n_lambda = 15;
  SimConfig sim;
  sim.n_sources = 1;
  sim.pair_ids = {{1, 2}, {3, 4}, {5, 6}};

  const McOutput a = monte_carlo(sim, cfg, method, 3, 1000, 1, false);
  const McOutput b = monte_carlo(sim, cfg, method, 3, 1000, 2, false);
  REQUIRE(a.runs.size() == 3);
  CHECK(a.failures == 0);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.runs[i].seed == 1000 + i);
    CHECK(a.runs[i].ospa == b.runs[i].ospa);
    CHECK(a.runs[i].wall_seconds == 0.0);
    CHECK(b.runs[i].wall_seconds == 0.0);
    CHECK(a.runs[i].cardinality_true == 1);
    CHECK(a.runs[i].ospa <= sim.ospa_cutoff);
    REQUIRE(a.runs[i].estimates.size() == b.runs[i].estimates.size());
    for (size_t j = 0; j < a.runs[i].estimates.size(); ++j)
      CHECK(a.runs[i].estimates[j].position == b.runs[i].estimates[j].position);
  }
  CHECK(a.mean_ospa == b.mean_ospa);
  CHECK(a.mean_ospa ==
        Approx((a.runs[0].ospa + a.runs[1].ospa + a.runs[2].ospa) / 3.0));

  const McOutput single = monte_carlo(sim, cfg, method, 1, 1000, 1, true);
  CHECK(single.mean_ospa == single.runs[0].ospa);
  CHECK(single.box.median == single.runs[0].ospa);
  CHECK(single.runs[0].wall_seconds > 0.0);

  CHECK_THROWS_AS(monte_carlo(sim, cfg, method, 0, 1, 1), InvalidParam);
}
