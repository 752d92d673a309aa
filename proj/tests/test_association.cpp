#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pfloc/association.hpp"
#include "test_support.hpp"

using namespace pfloc;
using Catch::Approx;

namespace {

DaConfig base_cfg() {
  DaConfig cfg;
  cfg.p_d = 0.95;
  cfg.mu_c = 1.0;
  cfg.mu_b = 0.1;
  return cfg;
}

PotentialSource one_kernel_ps(double mean, double var, double existence) {
  PotentialSource ps;
  ps.id = 1;
  ps.existence = existence;
  GaussianKernel k;
  k.mean = Eigen::VectorXd::Constant(1, mean);
  k.cov = Eigen::MatrixXd::Constant(1, 1, var);
  k.weight = 1.0;
  ps.belief.kernels.push_back(k);
  return ps;
}

double tv_against_density(const ParticleSet& cloud,
                          const std::function<double(double)>& density, double lo,
                          double hi, int bins) {
  Eigen::VectorXd hist = Eigen::VectorXd::Zero(bins);
  const double mass = cloud.weights.sum();
  const double w = (hi - lo) / bins;
  for (int i = 0; i < cloud.size(); ++i) {
    const double x = cloud.points(0, i);
    if (x < lo || x >= hi) continue;
    hist(static_cast<int>((x - lo) / w)) += cloud.weights(i) / mass;
  }
  double tv = 0.0, dmass = 0.0;
  std::vector<double> dens(bins);
  for (int b = 0; b < bins; ++b) {
    dens[b] = testsup::simpson(density, lo + b * w, lo + (b + 1) * w, 16);
    dmass += dens[b];
  }
  for (int b = 0; b < bins; ++b) tv += std::abs(hist(b) - dens[b] / dmass);
  return 0.5 * tv;
}

}  // namespace

TEST_CASE("fixed point on the smallest tree matches enumeration") {
  AssociationTables t;
  t.beta = {Eigen::Vector2d(0.05, 1.9)};
  t.xi = {Eigen::Vector2d(1.0, 1.0)};
  const DaResult res = da_fixed_point(t, base_cfg());
  CHECK(res.converged);
  CHECK(res.kappa[0](0) == 1.0);

  const testsup::DaMarginals bp = testsup::bp_marginals(t.beta, t.xi, res);
  CHECK(bp.a(0, 1) == Approx(1.9 / 1.95).epsilon(1e-9));

  const testsup::DaMarginals ex = testsup::enumerate_da(t.beta, t.xi);
  CHECK((bp.a - ex.a).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((bp.b - ex.b).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fixed point is exact on trees") {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> logu(-2.0, 2.0);
  const DaConfig cfg = base_cfg();

  for (int trial = 0; trial < 25; ++trial) {
    // one source, several measurements
    AssociationTables t;
    const int M = 1 + trial % 3;
    Eigen::VectorXd beta(M + 1);
    for (int m = 0; m <= M; ++m) beta(m) = std::exp(logu(rng));
    t.beta = {beta};
    for (int m = 0; m < M; ++m) {
      Eigen::VectorXd xi(2);
      xi << std::exp(logu(rng)), 1.0;
      t.xi.push_back(xi);
    }
    const DaResult res = da_fixed_point(t, cfg);
    const auto bp = testsup::bp_marginals(t.beta, t.xi, res);
    const auto ex = testsup::enumerate_da(t.beta, t.xi);
    CHECK((bp.a - ex.a).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((bp.b - ex.b).cwiseAbs().maxCoeff() < 1e-6);

    // several sources, one measurement
    AssociationTables t2;
    const int J = 1 + trial % 3;
    for (int j = 0; j < J; ++j)
      t2.beta.push_back(Eigen::Vector2d(std::exp(logu(rng)), std::exp(logu(rng))));
    Eigen::VectorXd xi(J + 1);
    xi.setOnes();
    xi(0) = std::exp(logu(rng));
    t2.xi = {xi};
    const DaResult res2 = da_fixed_point(t2, cfg);
    const auto bp2 = testsup::bp_marginals(t2.beta, t2.xi, res2);
    const auto ex2 = testsup::enumerate_da(t2.beta, t2.xi);
    CHECK((bp2.a - ex2.a).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((bp2.b - ex2.b).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("fixed point tracks enumeration on loopy tables") {
  // tables shaped like the filter produces them: each source has one dominant
  // measurement (collisions allowed) plus weak cross terms and a miss mass
  std::mt19937_64 rng(777);
  std::uniform_int_distribution<int> dim(1, 3);
  std::uniform_real_distribution<double> ualpha(0.3, 1.0), upd(0.6, 0.9),
      uown(-0.5, 1.5), ucross(-4.0, -1.0), uxi(-1.0, 1.0);
  const DaConfig cfg = base_cfg();

  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int J = dim(rng), M = dim(rng);
    AssociationTables t;
    for (int j = 0; j < J; ++j) {
      const double alpha = ualpha(rng), pd = upd(rng);
      const int own = std::uniform_int_distribution<int>(0, M - 1)(rng);
      Eigen::VectorXd beta(M + 1);
      beta(0) = (1.0 - pd) * alpha + (1.0 - alpha);
      for (int m = 0; m < M; ++m)
        beta(m + 1) = pd * alpha * std::exp(m == own ? uown(rng) : ucross(rng));
      t.beta.push_back(beta);
    }
    for (int m = 0; m < M; ++m) {
      Eigen::VectorXd xi = Eigen::VectorXd::Ones(J + 1);
      xi(0) = std::exp(uxi(rng));
      t.xi.push_back(xi);
    }
    const DaResult res = da_fixed_point(t, cfg);
    const auto bp = testsup::bp_marginals(t.beta, t.xi, res);
    const auto ex = testsup::enumerate_da(t.beta, t.xi);
    for (int j = 0; j < J; ++j)
      worst = std::max(worst, 0.5 * (bp.a.row(j) - ex.a.row(j)).cwiseAbs().sum());
    for (int m = 0; m < M; ++m)
      worst = std::max(worst, 0.5 * (bp.b.row(m) - ex.b.row(m)).cwiseAbs().sum());
  }
  CHECK(worst < 0.05);
}

TEST_CASE("message scaling of one source leaves marginals unchanged") {
  AssociationTables t;
  t.beta = {Eigen::Vector3d(0.4, 1.1, 0.3), Eigen::Vector3d(0.9, 0.2, 1.7)};
  t.xi = {Eigen::Vector3d(1.3, 1.0, 1.0), Eigen::Vector3d(0.8, 1.0, 1.0)};
  const DaConfig cfg = base_cfg();
  const auto m1 = testsup::bp_marginals(t.beta, t.xi, da_fixed_point(t, cfg));
  t.beta[0] *= 7.3;
  const auto m2 = testsup::bp_marginals(t.beta, t.xi, da_fixed_point(t, cfg));
  CHECK((m1.a - m2.a).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((m1.b - m2.b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("no measurements: trivial messages and pure miss term") {
  AssociationTables t;
  t.beta = {Eigen::VectorXd::Constant(1, 0.35)};
  const DaResult res = da_fixed_point(t, base_cfg());
  REQUIRE(res.kappa.size() == 1);
  CHECK(res.kappa[0].size() == 1);
  CHECK(res.kappa[0](0) == 1.0);
  CHECK(res.iota.empty());

  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  const PotentialSource ps = one_kernel_ps(0.0, 4.0, 0.8);
  const DaConfig cfg = base_cfg();
  const auto sched = lambda_schedule(10, ScheduleKind::Uniform);
  const FlowedBeta fb = flow_embedded_beta(ps, model, {}, cfg, FlowKind::Edh, sched, 50,
                                           RngPath(1));
  REQUIRE(fb.beta.size() == 1);
  CHECK(fb.beta(0) == Approx((1.0 - cfg.p_d) * 0.8 + 0.2).epsilon(1e-12));
}

TEST_CASE("association message with an arranged likelihood ratio") {
  // flat measurement map: the flow cannot move anything, the ratio is exact
  const double R = 1.0 / (8.0 * M_PI);  // peak density = 2
  const testsup::LinearToyModel model(0.0, 5.0, R, 1.0);
  DaConfig cfg = base_cfg();
  cfg.mu_c = 1.0;
  const PotentialSource ps = one_kernel_ps(0.0, 1.0, 1.0);
  const auto sched = lambda_schedule(5, ScheduleKind::Uniform);
  const FlowedBeta fb = flow_embedded_beta(ps, model, {5.0}, cfg, FlowKind::Edh, sched, 1,
                                           RngPath(3));
  REQUIRE(fb.beta.size() == 2);
  CHECK(fb.beta(0) == Approx(0.05).epsilon(1e-12));
  CHECK(fb.beta(1) == Approx(0.95 * 2.0).epsilon(1e-9));
}

TEST_CASE("association message against the quadrature oracle") {
  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  DaConfig cfg = base_cfg();
  cfg.p_d = 0.9;
  cfg.mu_c = 1.5;
  const double d = cfg.mu_c * 0.2;
  const double z = 2.0;

  PotentialSource ps;
  ps.id = 3;
  ps.existence = 0.8;
  GaussianKernel k1, k2;
  k1.mean = Eigen::VectorXd::Constant(1, 0.0);
  k1.cov = Eigen::MatrixXd::Constant(1, 1, 4.0);
  k1.weight = 0.6;
  k2.mean = Eigen::VectorXd::Constant(1, 3.0);
  k2.cov = Eigen::MatrixXd::Constant(1, 1, 1.0);
  k2.weight = 0.4;
  ps.belief.kernels = {k1, k2};

  const auto mixture = [&](double x) {
    return 0.6 * normal_pdf(x, 0.0, 4.0) + 0.4 * normal_pdf(x, 3.0, 1.0);
  };
  const double oracle =
      0.8 * testsup::simpson(
                [&](double x) {
                  return mixture(x) * cfg.p_d * normal_pdf(z, 0.7 * x, 0.25) / d;
                },
                -25.0, 25.0, 8192);
  // closed form as a check on the oracle itself
  const double closed = 0.8 * cfg.p_d / d *
                        (0.6 * normal_pdf(z, 0.0, 0.49 * 4.0 + 0.25) +
                         0.4 * normal_pdf(z, 2.1, 0.49 + 0.25));
  CHECK(oracle == Approx(closed).epsilon(1e-9));

  const auto sched = lambda_schedule(30, ScheduleKind::Uniform);
  for (FlowKind kind : {FlowKind::Edh, FlowKind::Ledh, FlowKind::Gromov}) {
    const FlowedBeta fb =
        flow_embedded_beta(ps, model, {z}, cfg, kind, sched, 5000, RngPath(11));
    CHECK(fb.flow_failures == 0);
    CHECK(fb.beta(1) == Approx(oracle).epsilon(0.02));
    CHECK(fb.beta(0) == Approx((1.0 - 0.9) * 0.8 + 0.2).epsilon(1e-12));
  }
}

TEST_CASE("certain detection leaves only nonexistence in the miss entry") {
  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  DaConfig cfg = base_cfg();
  cfg.p_d = 1.0;
  const PotentialSource ps = one_kernel_ps(1.0, 2.0, 0.65);
  const auto sched = lambda_schedule(10, ScheduleKind::Uniform);
  const FlowedBeta fb =
      flow_embedded_beta(ps, model, {0.5}, cfg, FlowKind::Edh, sched, 200, RngPath(8));
  CHECK(fb.beta(0) == Approx(1.0 - 0.65).epsilon(1e-12));
}

TEST_CASE("birth expectation matches the smoothed closed form") {
  const double R = 0.09;
  const testsup::LinearToyModel model(0.5, 0.0, R, 0.25);
  const BirthSampler sampler = [](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 10.0);
    return Eigen::VectorXd::Constant(1, u(rng));
  };
  const int n = 20000;
  const std::vector<double> z = {2.5, 0.0, 30.0};
  const std::vector<double> est =
      birth_expectation(model, z, sampler, n, RngPath(99).engine());

  // oracle: uniform birth through the linear map, convolved with the
  // noise-plus-bandwidth gaussian
  const double sd = 0.5 * 10.0 / std::sqrt(12.0);
  const double bw = 1.06 * sd * std::pow(n, -0.2);
  const double var = R + bw * bw;
  const auto oracle = [&](double zz) {
    return testsup::simpson(
        [&](double x) { return 0.1 * normal_pdf(zz, 0.5 * x, var); }, 0.0, 10.0, 4096);
  };
  CHECK(est[0] == Approx(oracle(2.5)).epsilon(0.02));
  CHECK(est[1] == Approx(oracle(0.0)).epsilon(0.03));
  CHECK(est[0] == Approx(0.2).epsilon(0.02));
  CHECK(est[2] < 1e-12);  // far outside the reachable interval
}

TEST_CASE("new-source messages") {
  const testsup::LinearToyModel model(0.5, 0.0, 0.09, 0.25);
  DaConfig cfg = base_cfg();
  cfg.mu_c = 1.5;
  cfg.mu_b = 0.4;
  cfg.birth_samples = 20000;
  const BirthSampler sampler = [](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 10.0);
    return Eigen::VectorXd::Constant(1, u(rng));
  };
  const std::vector<double> z = {2.5, 30.0};
  const MeasurementNorm norm =
      measurement_norm(model, z, cfg, sampler, RngPath(5).engine());
  CHECK(norm.usable[0]);
  CHECK(norm.denom[0] == Approx(1.5 * 0.25).epsilon(1e-12));
  CHECK(norm.clutter_mass[0] == Approx(1.0).epsilon(1e-12));
  CHECK(norm.birth_mass[0] == Approx(0.4 * 0.2 / 0.375).epsilon(0.03));

  const std::vector<Eigen::VectorXd> xi = new_ps_xi(norm, 2);
  REQUIRE(xi.size() == 2);
  REQUIRE(xi[0].size() == 3);
  CHECK(xi[0](0) == Approx(1.0 + norm.birth_mass[0]).epsilon(1e-12));
  CHECK(xi[0](1) == 1.0);
  CHECK(xi[0](2) == 1.0);
  // unreachable measurement: no birth mass, xi(0) collapses to the clutter term
  CHECK(xi[1](0) == Approx(1.0).margin(1e-9));

  // no birth intensity at all
  MeasurementNorm dead;
  dead.denom = {0.375};
  dead.clutter_mass = {1.0};
  dead.birth_mass = {0.0};
  dead.usable = {true};
  CHECK(new_ps_xi(dead, 0)[0](0) == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("measurement update against the quadrature posterior") {
  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  DaConfig cfg = base_cfg();
  cfg.p_d = 0.9;
  cfg.mu_c = 1.5;
  const double d = cfg.mu_c * 0.2;
  const double z = 1.0;
  const double alpha = 0.7;
  const PotentialSource ps = one_kernel_ps(0.0, 4.0, alpha);
  const auto sched = lambda_schedule(30, ScheduleKind::Uniform);
  const FlowedBeta fb =
      flow_embedded_beta(ps, model, {z}, cfg, FlowKind::Edh, sched, 20000, RngPath(21));

  const Eigen::VectorXd kappa = Eigen::VectorXd::Ones(2);
  const PotentialSource post = measurement_update_gamma(ps, kappa, fb, cfg, true);

  const auto gamma1 = [&](double x) {
    return (1.0 - cfg.p_d) + cfg.p_d * normal_pdf(z, 0.7 * x, 0.25) / d;
  };
  const double e_gamma = testsup::simpson(
      [&](double x) { return normal_pdf(x, 0.0, 4.0) * gamma1(x); }, -20.0, 20.0, 8192);
  const double exact_existence = alpha * e_gamma / (alpha * e_gamma + (1.0 - alpha));
  CHECK(post.existence == Approx(exact_existence).margin(0.015));

  // spatial belief against the unnormalized posterior density
  REQUIRE(post.belief.particles.size() == 1);
  const auto target = [&](double x) { return normal_pdf(x, 0.0, 4.0) * gamma1(x); };
  CHECK(tv_against_density(post.belief.particles[0], target, -10.0, 10.0, 60) < 0.05);
  CHECK(post.belief.total_weight() == Approx(1.0).epsilon(1e-9));
}

TEST_CASE("measurement explained elsewhere only discounts existence") {
  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  DaConfig cfg = base_cfg();
  const double alpha = 0.8;
  const PotentialSource ps = one_kernel_ps(2.0, 3.0, alpha);
  const auto sched = lambda_schedule(10, ScheduleKind::Uniform);
  const FlowedBeta fb =
      flow_embedded_beta(ps, model, {1.0}, cfg, FlowKind::Edh, sched, 20000, RngPath(2));

  Eigen::VectorXd kappa(2);
  kappa << 1.0, 0.0;
  const PotentialSource post = measurement_update_gamma(ps, kappa, fb, cfg);
  const double miss = alpha * (1.0 - cfg.p_d);
  CHECK(post.existence == Approx(miss / (miss + 1.0 - alpha)).epsilon(1e-9));
  CHECK(post.belief.kernels.size() == 1);
  CHECK(post.belief.kernels[0].mean(0) == Approx(2.0).margin(0.06));
  CHECK(post.belief.kernels[0].cov(0, 0) == Approx(3.0).epsilon(0.05));

  Eigen::VectorXd dead(2);
  dead << 0.0, 0.0;
  CHECK_THROWS_AS(measurement_update_gamma(ps, dead, fb, cfg), ZeroMass);
}

TEST_CASE("single source, single measurement recovers the conjugate posterior") {
  const testsup::LinearToyModel model(0.7, 0.0, 0.25, 0.2);
  DaConfig cfg = base_cfg();
  cfg.p_d = 1.0;
  const double z = 2.0, mu0 = 0.0, P = 4.0;
  const PotentialSource ps = one_kernel_ps(mu0, P, 1.0);
  const auto sched = lambda_schedule(30, ScheduleKind::Uniform);
  const FlowedBeta fb =
      flow_embedded_beta(ps, model, {z}, cfg, FlowKind::Edh, sched, 10000, RngPath(6));

  AssociationTables t;
  t.beta = {fb.beta};
  t.xi = {Eigen::Vector2d(1.0, 1.0)};
  const DaResult res = da_fixed_point(t, cfg);
  const PotentialSource post = measurement_update_gamma(ps, res.kappa[0], fb, cfg);

  const double s = 0.49 * P + 0.25;
  const double mu_post = mu0 + P * 0.7 / s * (z - 0.7 * mu0);
  CHECK(post.existence > 0.999);
  const auto [mean, cov] = post.belief.moments();
  CHECK(std::abs(mean(0) - mu_post) < 0.02 * std::sqrt(P));
  CHECK(cov(0, 0) == Approx(P - P * 0.7 * 0.7 * P / s).epsilon(0.1));
}

TEST_CASE("new sources are built on the measurement surface") {
  const SensorPair pair = SensorPair::make(
      1, Receiver{1, {1000.0, 0.0, 0.0}}, Receiver{2, {-1000.0, 0.0, 0.0}});
  Medium med;
  med.sigma_v = 0.5 / med.c;
  const TdoaSensorModel model(pair, med);
  Roi roi;
  DaConfig cfg = base_cfg();
  cfg.mu_b = 0.3;
  cfg.birth_samples = 4000;
  BirthParams bp;
  bp.n_kernels = 25;
  bp.band_scale = 100.0;
  bp.min_accepted = 500;
  bp.min_kernel_std = 2.0;
  const auto sched = lambda_schedule(20, ScheduleKind::Uniform);
  const BirthSampler sampler = [&roi](std::mt19937_64& rng) {
    return Eigen::VectorXd(roi.sample(rng));
  };

  const std::vector<double> z = {0.0};
  const MeasurementNorm norm =
      measurement_norm(model, z, cfg, sampler, RngPath(31).engine());
  const std::vector<Eigen::VectorXd> iota = {Eigen::VectorXd::Ones(1)};
  const std::vector<PotentialSource> born =
      new_ps_belief(model, z, norm, iota, cfg, roi, bp, FlowKind::Edh, sched, 60,
                    RngPath(31), 1, 100);
  REQUIRE(born.size() == 1);
  const PotentialSource& ps = born[0];
  CHECK(ps.id == 100);
  CHECK(ps.origin.sensor == 1);
  const double b = norm.birth_mass[0];
  CHECK(ps.existence == Approx(b / (b + 1.0)).epsilon(1e-9));
  ps.validate();
  for (const auto& k : ps.belief.kernels)
    CHECK(std::abs(model.predict(k.mean)) * med.c < 10.0);  // pulled onto the surface

  // a legacy claim drains the birth existence
  const std::vector<Eigen::VectorXd> claimed = {Eigen::Vector2d(1.0, 9.0)};
  const std::vector<PotentialSource> born2 =
      new_ps_belief(model, z, norm, claimed, cfg, roi, bp, FlowKind::Edh, sched, 60,
                    RngPath(31), 1, 100);
  CHECK(born2[0].existence == Approx(b / (b + 1.0 + 9.0)).epsilon(1e-9));

  // unreachable measurement: born dead
  MeasurementNorm bad;
  bad.denom = {0.375};
  bad.clutter_mass = {1.0};
  bad.birth_mass = {0.0};
  bad.usable = {true};
  BirthParams tight = bp;
  tight.max_candidates = 20000;
  const std::vector<PotentialSource> dead =
      new_ps_belief(model, {2.0 * pair.max_tdoa(med)}, bad, iota, cfg, roi, tight,
                    FlowKind::Edh, sched, 60, RngPath(31), 1, 100);
  CHECK(dead[0].existence == 0.0);
}

TEST_CASE("pruning by existence threshold") {
  std::vector<PotentialSource> list;
  for (double e : {0.9, 1e-4, 0.5, 0.0}) {
    PotentialSource ps = one_kernel_ps(0.0, 1.0, e);
    ps.id = static_cast<int>(list.size());
    list.push_back(ps);
  }
  const auto kept = prune(list, 1e-3);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].id == 0);
  CHECK(kept[1].id == 2);
  CHECK(prune(list, 0.0).size() == 4);
  CHECK(prune(list, 2.0).empty());
}
