#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "pfloc/errors.hpp"
#include "pfloc/flow.hpp"
#include "pfloc/gaussian.hpp"
#include "pfloc/gmm.hpp"
#include "pfloc/model.hpp"
#include "pfloc/rng.hpp"

namespace pfloc {

// Potential source: a spatial belief plus the probability that it exists.
// Nonexistence needs no spatial density; it is carried as scalar mass.
struct PotentialSource {
  int id = 0;
  GmmBelief belief;
  double existence = 0.0;
  struct Origin {
    int sensor = 0;
    int measurement = 0;
  } origin;

  void validate() const {
    if (!(existence >= 0.0 && existence <= 1.0))
      throw InvalidParam("PotentialSource: existence outside [0,1]");
    if (existence > 0.0) belief.validate();
  }
};

struct SensorScan {
  SensorPair pair;
  std::vector<double> measurements;
};

struct DaConfig {
  double p_d = 0.95;
  double mu_c = 1.0;
  double mu_b = 0.1;
  int bp_max_iters = 200;
  double bp_tol = 1e-6;
  int birth_samples = 1000;   // draws behind the birth expectation
  double refit_min_std = 1e-3;  // floor for kernels refit from clouds

  void validate() const {
    if (!(p_d > 0.0 && p_d <= 1.0)) throw InvalidParam("DaConfig: p_d must be in (0,1]");
    if (!(mu_c >= 0.0)) throw InvalidParam("DaConfig: mu_c must be nonnegative");
    if (!(mu_b > 0.0)) throw InvalidParam("DaConfig: mu_b must be positive");
    if (bp_max_iters < 1) throw InvalidParam("DaConfig: bp_max_iters must be positive");
    if (!(bp_tol > 0.0)) throw InvalidParam("DaConfig: bp_tol must be positive");
    if (birth_samples < 1) throw InvalidParam("DaConfig: birth_samples must be positive");
  }
};

// Moment refits flatten their weights (see tempered_weights) until at least
// this many particles carry the estimate; a refit from fewer collapses the
// kernel into an overconfident point mass that later sensors can only veto.
inline constexpr double kRefitMinEss = 8.0;

struct AssociationTables {
  std::vector<Eigen::VectorXd> beta;   // one per legacy PS, indexed a = 0..M
  std::vector<Eigen::VectorXd> xi;     // one per measurement, indexed b = 0..J
  std::vector<Eigen::VectorXd> kappa;  // outputs, same shapes
  std::vector<Eigen::VectorXd> iota;
};

// Per-measurement normalization of the likelihood ratios. The natural scale
// is the clutter intensity mu_c * f_c(z); when that vanishes (clutter-free
// configs) the birth intensity stands in. Association marginals are invariant
// to this choice because every origin hypothesis of a measurement scales
// together; it only keeps the message tables finite.
struct MeasurementNorm {
  std::vector<double> denom;        // d_m > 0 where usable
  std::vector<double> clutter_mass; // mu_c f_c(z_m) / d_m
  std::vector<double> birth_mass;   // mu_b E_birth[f(z_m|x)] / d_m
  std::vector<bool> usable;         // false -> measurement is skipped entirely
};

using BirthSampler = std::function<Eigen::VectorXd(std::mt19937_64&)>;

// Smoothed Monte-Carlo estimate of E_birth[f(z|x)] for each measurement:
// kernel-density estimate of the induced density of h(x) under the birth
// prior, evaluated at z. The smoothing bandwidth (Silverman) is folded into
// the measurement noise, which keeps the estimate nonzero at realistic noise
// levels where a plain average of point likelihoods underflows to zero.
inline std::vector<double> birth_expectation(const MeasurementModel& model,
                                             const std::vector<double>& z,
                                             const BirthSampler& sampler, int n_samples,
                                             std::mt19937_64 rng) {
  if (n_samples < 2) throw InvalidParam("birth_expectation: need at least two samples");
  Eigen::VectorXd h(n_samples);
  for (int i = 0; i < n_samples; ++i) h(i) = model.predict(sampler(rng));
  const double mean = h.mean();
  const double sd = std::sqrt((h.array() - mean).square().sum() / (n_samples - 1));
  const double bw = 1.06 * sd * std::pow(static_cast<double>(n_samples), -0.2);
  const double var = model.noise_var() + bw * bw;

  std::vector<double> out(z.size());
  for (size_t m = 0; m < z.size(); ++m) {
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) acc += normal_pdf(z[m], h(i), var);
    out[m] = acc / n_samples;
  }
  return out;
}

inline MeasurementNorm measurement_norm(const MeasurementModel& model,
                                        const std::vector<double>& z, const DaConfig& cfg,
                                        const BirthSampler& sampler, std::mt19937_64 rng) {
  const std::vector<double> eb =
      birth_expectation(model, z, sampler, cfg.birth_samples, rng);
  MeasurementNorm n;
  n.denom.resize(z.size());
  n.clutter_mass.resize(z.size());
  n.birth_mass.resize(z.size());
  n.usable.resize(z.size());
  for (size_t m = 0; m < z.size(); ++m) {
    const double cl = cfg.mu_c * model.clutter_density(z[m]);
    const double bi = cfg.mu_b * eb[m];
    const double d = cl > 0.0 ? cl : bi;
    n.denom[m] = d;
    n.usable[m] = d > 0.0;
    n.clutter_mass[m] = n.usable[m] ? cl / d : 0.0;
    n.birth_mass[m] = n.usable[m] ? bi / d : 0.0;
  }
  return n;
}

// ---- flow-embedded association messages for a legacy PS ----

struct FlowedCloud {
  ParticleSet cloud;             // flowed points; weights = exp(log_w), which
                                 // can underflow to zero -- log_w is authoritative
  Eigen::VectorXd log_w;         // log importance weight (existence mass scale)
  Eigen::VectorXd log_lr;        // log( p_d f(z|x) / d ) per particle
  GaussianKernel kernel1;        // moment track at lambda = 1 (empty for the
                                 // per-particle kind, which has no single track)
  double log_claim = -std::numeric_limits<double>::infinity();  // log mass of
                                 // association a = m for this kernel
  bool ok = false;
};

struct FlowedBeta {
  Eigen::VectorXd beta;                        // a = 0..M
  std::vector<ParticleSet> prior_clouds;       // per kernel, pre-flow
  std::vector<std::vector<FlowedCloud>> flows; // [measurement][kernel]
  int flow_failures = 0;
};

// One parallel flow per (measurement, kernel): fresh particles from each
// kernel migrate toward each measurement, importance weights follow the
// deterministic-map or moment-propagation proposal, and
//   beta(m) = sum_k claim(m, k),   beta(0) = (1-p_d) alpha + (1-alpha).
inline FlowedBeta flow_embedded_beta(const PotentialSource& ps, const MeasurementModel& model,
                                     const std::vector<double>& z,
                                     const MeasurementNorm& norm, const DaConfig& cfg,
                                     FlowKind kind, const PseudoTimeSchedule& schedule,
                                     int n_particles, const RngPath& rng) {
  ps.validate();
  cfg.validate();
  if (static_cast<size_t>(norm.denom.size()) != z.size())
    throw InvalidParam("flow_embedded_beta: normalization does not match measurements");
  const int M = static_cast<int>(z.size());
  const int K = static_cast<int>(ps.belief.kernels.size());
  const double alpha = ps.existence;

  FlowedBeta out;
  out.beta = Eigen::VectorXd::Zero(M + 1);
  out.beta(0) = (1.0 - cfg.p_d) * alpha + (1.0 - alpha);
  out.prior_clouds.resize(K);
  out.flows.assign(M, std::vector<FlowedCloud>(K));

  for (int k = 0; k < K; ++k) {
    auto engine = rng.child(stream::kSampling).child(k).engine();
    out.prior_clouds[k] = sample_kernel(ps.belief.kernels[k], n_particles, engine);
    out.prior_clouds[k].weights *= alpha;  // mass alpha * omega_k
  }

  for (int m = 0; m < M; ++m) {
    if (!norm.usable[m]) continue;
    const double log_pd_over_d = std::log(cfg.p_d) - std::log(norm.denom[m]);
    for (int k = 0; k < K; ++k) {
      const GaussianKernel& kern = ps.belief.kernels[k];
      FlowedCloud& fc = out.flows[m][k];
      try {
        const CholeskyGaussian prior_pdf(kern.mean, kern.cov);
        const ModelProvider provider = [&](const Eigen::VectorXd& xbar) {
          return linearize(model, z[m], xbar, kern.mean, kern.cov);
        };
        auto flow_engine =
            rng.child(stream::kLegacyFlow).child(m).child(k).engine();
        const MigrationResult mig = migrate(out.prior_clouds[k], provider, schedule, kind,
                                            kern.mean, &flow_engine);

        fc.log_w = prior_pdf.log_pdf_batch(mig.particles.points) +
                   out.prior_clouds[k].weights.array().log().matrix();
        if (kind == FlowKind::Gromov) {
          const CholeskyGaussian proposal(mig.mu1, mig.sigma1);
          fc.log_w -= proposal.log_pdf_batch(mig.particles.points);
        } else {
          fc.log_w += mig.log_theta - prior_pdf.log_pdf_batch(out.prior_clouds[k].points);
        }
        fc.log_lr.resize(n_particles);
        for (int i = 0; i < n_particles; ++i)
          fc.log_lr(i) =
              model.log_likelihood(z[m], mig.particles.points.col(i)) + log_pd_over_d;
        // -inf (hard zero weight) is fine, NaN or +inf is not
        if (fc.log_w.hasNaN() || fc.log_lr.hasNaN() ||
            fc.log_w.maxCoeff() > std::numeric_limits<double>::max() ||
            fc.log_lr.maxCoeff() > std::numeric_limits<double>::max())
          throw NonFiniteState("flow_embedded_beta: non-finite weights");
        fc.cloud.points = mig.particles.points;
        fc.cloud.weights = fc.log_w.array().exp();
        fc.kernel1.weight = kern.weight;  // mean/cov filled by the tracked branch
        // Claim mass of association a = m: the particle estimate
        // sum_i w_i p_d f(z|x_i)/d whenever its importance weights are
        // healthy. A tight likelihood band can leave that sum dominated by
        // whether any particle happens to land in band, understating the
        // mass by hundreds of orders once curvature bends the band away
        // from an affinely flowed cloud; the kinds that track a single
        // linearized posterior then fall back to the closed-form evidence
        //   alpha omega_k p_d/d N(z_eff; H mu0, H P0 H' + R)
        // at the flowed linearization, with the statistical-linearization
        // residual folded in, and to the matching conjugate update (Joseph
        // form) in place of the degenerate refit. The per-particle kind has
        // no single track and keeps its (healthy) particle estimates.
        if (mig.mu1.size() != 0 &&
            log_weight_ess(fc.log_w + fc.log_lr) < kRefitMinEss) {
          const LinearizedModel lin1 = provider(mig.mu1);
          const SlrResidual slr = slr_residual(model, z[m], lin1, kern.mean, kern.cov);
          const double r_eff = lin1.R(0, 0) + slr.var;
          const Eigen::VectorXd PHt = kern.cov * lin1.H.transpose();
          const double s_ev = (lin1.H * PHt)(0) + r_eff;
          const double pred = (lin1.H * kern.mean)(0);
          const double z_used = lin1.z(0) - slr.bias;
          fc.log_claim = std::log(alpha * kern.weight) + log_pd_over_d +
                         log_normal_pdf(z_used, pred, s_ev);
          const Eigen::VectorXd gain = PHt / s_ev;
          fc.kernel1.mean = kern.mean + gain * (z_used - pred);
          const Eigen::MatrixXd ikh =
              Eigen::MatrixXd::Identity(kern.mean.size(), kern.mean.size()) -
              gain * lin1.H;
          fc.kernel1.cov = ikh * kern.cov * ikh.transpose() +
                           r_eff * gain * gain.transpose();
        } else {
          fc.log_claim = log_sum_exp(fc.log_w + fc.log_lr);
        }
        fc.ok = true;
        out.beta(m + 1) += std::exp(fc.log_claim);
      } catch (const Error&) {
        fc = FlowedCloud{};
        ++out.flow_failures;
      }
    }
  }
  if (!out.beta.allFinite())
    throw NonFiniteState("flow_embedded_beta: non-finite message table");
  return out;
}

// Convenience overload using the plain clutter normalization (tests, mu_c > 0).
inline FlowedBeta flow_embedded_beta(const PotentialSource& ps, const MeasurementModel& model,
                                     const std::vector<double>& z, const DaConfig& cfg,
                                     FlowKind kind, const PseudoTimeSchedule& schedule,
                                     int n_particles, const RngPath& rng) {
  MeasurementNorm norm;
  for (double zm : z) {
    const double d = cfg.mu_c * model.clutter_density(zm);
    norm.denom.push_back(d);
    norm.clutter_mass.push_back(d > 0.0 ? 1.0 : 0.0);
    norm.birth_mass.push_back(0.0);
    norm.usable.push_back(d > 0.0);
  }
  return flow_embedded_beta(ps, model, z, norm, cfg, kind, schedule, n_particles, rng);
}

// ---- new-PS messages ----

// xi(0) = (clutter + birth mass)/d = 1 + B when the clutter normalization is
// in effect; xi(b >= 1) = 1, consistency being enforced by the association
// constraint in the fixed point.
inline std::vector<Eigen::VectorXd> new_ps_xi(const MeasurementNorm& norm, int n_legacy) {
  std::vector<Eigen::VectorXd> xi(norm.denom.size());
  for (size_t m = 0; m < norm.denom.size(); ++m) {
    xi[m] = Eigen::VectorXd::Ones(n_legacy + 1);
    xi[m](0) = norm.usable[m] ? norm.clutter_mass[m] + norm.birth_mass[m] : 1.0;
  }
  return xi;
}

// ---- iterative data association ----

struct DaResult {
  std::vector<Eigen::VectorXd> kappa;  // per legacy PS: [1, nu_1j, ..., nu_Mj]
  std::vector<Eigen::VectorXd> iota;   // per measurement: [1, mu_1m, ..., mu_Jm]
  bool converged = true;
  int iters = 0;
};

// Bipartite sum-product sweep between source-association variables a_j and
// measurement-origin variables b_m:
//   mu_{j->m} = beta_j(m) / (beta_j(0) + sum_{m' != m} beta_j(m') nu_{m'->j})
//   nu_{m->j} = xi_m(j)   / (xi_m(0)   + sum_{j' != j} xi_m(j') mu_{j'->m})
// Exact on trees; the usual fixed point otherwise.
inline DaResult da_fixed_point(const AssociationTables& tables, const DaConfig& cfg) {
  cfg.validate();
  const int J = static_cast<int>(tables.beta.size());
  const int M = static_cast<int>(tables.xi.size());
  for (const auto& b : tables.beta)
    if (b.size() != M + 1 || !b.allFinite() || (b.array() < 0.0).any())
      throw InvalidParam("da_fixed_point: bad beta table");
  for (const auto& x : tables.xi)
    if (x.size() != J + 1 || !x.allFinite() || (x.array() < 0.0).any())
      throw InvalidParam("da_fixed_point: bad xi table");

  Eigen::MatrixXd mu = Eigen::MatrixXd::Ones(J, M);  // a-side -> b-side
  Eigen::MatrixXd nu = Eigen::MatrixXd::Ones(M, J);  // b-side -> a-side
  constexpr double kTiny = 1e-300;

  DaResult res;
  res.converged = false;
  for (res.iters = 1; res.iters <= cfg.bp_max_iters; ++res.iters) {
    double worst = 0.0;
    for (int j = 0; j < J; ++j) {
      double dot = 0.0;
      for (int m = 0; m < M; ++m) dot += tables.beta[j](m + 1) * nu(m, j);
      for (int m = 0; m < M; ++m) {
        const double denom =
            tables.beta[j](0) + dot - tables.beta[j](m + 1) * nu(m, j);
        const double next = tables.beta[j](m + 1) / std::max(denom, kTiny);
        worst = std::max(worst,
                         std::abs(next - mu(j, m)) /
                             std::max({std::abs(next), std::abs(mu(j, m)), 1e-12}));
        mu(j, m) = next;
      }
    }
    for (int m = 0; m < M; ++m) {
      double dot = 0.0;
      for (int j = 0; j < J; ++j) dot += tables.xi[m](j + 1) * mu(j, m);
      for (int j = 0; j < J; ++j) {
        const double denom = tables.xi[m](0) + dot - tables.xi[m](j + 1) * mu(j, m);
        nu(m, j) = tables.xi[m](j + 1) / std::max(denom, kTiny);
      }
    }
    if (worst < cfg.bp_tol) {
      res.converged = true;
      break;
    }
  }
  res.iters = std::min(res.iters, cfg.bp_max_iters);

  res.kappa.resize(J);
  for (int j = 0; j < J; ++j) {
    res.kappa[j] = Eigen::VectorXd::Ones(M + 1);
    for (int m = 0; m < M; ++m) res.kappa[j](m + 1) = nu(m, j);
  }
  res.iota.resize(M);
  for (int m = 0; m < M; ++m) {
    res.iota[m] = Eigen::VectorXd::Ones(J + 1);
    for (int j = 0; j < J; ++j) res.iota[m](j + 1) = mu(j, m);
  }
  return res;
}

// ---- measurement update of a legacy PS ----

// Combines the association events of each kernel under the BP weights:
// a = 0 keeps the prior kernel with mass kappa(0)(1 - p_d) alpha omega_k,
// a = m contributes the flowed posterior with mass kappa(m) claim(m, k), and
// nonexistence keeps kappa(0)(1 - alpha). A flowed posterior is the tracked
// linearized Gaussian when the flow carries one, otherwise the moment refit
// of its weighted cloud (tempered, so a handful of dominant particles cannot
// collapse the kernel to a point). The event mixture is moment-matched back
// into one Gaussian per kernel, preserving the kernel count. All masses are
// combined in log scale: deep likelihood tails otherwise underflow to hard
// zeros, and the PS dies even when it is the only explanation left.
inline PotentialSource measurement_update_gamma(const PotentialSource& ps,
                                                const Eigen::VectorXd& kappa,
                                                const FlowedBeta& flowed,
                                                const DaConfig& cfg,
                                                bool keep_particles = false) {
  const int K = static_cast<int>(ps.belief.kernels.size());
  const int M = static_cast<int>(flowed.flows.size());
  if (kappa.size() != M + 1) throw InvalidParam("measurement_update_gamma: kappa size");
  const double neg_inf = -std::numeric_limits<double>::infinity();

  const double log_miss = std::log(kappa(0)) + std::log1p(-cfg.p_d);
  std::vector<std::vector<GaussianKernel>> comps(K);
  std::vector<std::vector<double>> log_cm(K);
  Eigen::VectorXd log_mass = Eigen::VectorXd::Constant(K, neg_inf);
  for (int k = 0; k < K; ++k) {
    const GaussianKernel& prior_k = ps.belief.kernels[k];
    comps[k].push_back({prior_k.mean, prior_k.cov, 0.0});
    log_cm[k].push_back(log_miss + std::log(ps.existence * prior_k.weight));
    for (int m = 0; m < M; ++m) {
      const FlowedCloud& fc = flowed.flows[m][k];
      if (!fc.ok) continue;
      const double lc = std::log(kappa(m + 1)) + fc.log_claim;
      if (!std::isfinite(lc)) continue;  // hard zero claims nothing
      GaussianKernel g;
      if (fc.kernel1.mean.size() != 0) {
        g.mean = fc.kernel1.mean;
        g.cov = floor_cov(fc.kernel1.cov, cfg.refit_min_std);
      } else {
        ParticleSet post;
        post.points = fc.cloud.points;
        post.weights = tempered_weights(fc.log_w + fc.log_lr, kRefitMinEss);
        const GaussianKernel rk = refit_kernel(post, cfg.refit_min_std);
        g.mean = rk.mean;
        g.cov = rk.cov;
      }
      g.weight = 0.0;  // assigned after the kernel-local shift
      comps[k].push_back(std::move(g));
      log_cm[k].push_back(lc);
    }
    const Eigen::Map<const Eigen::VectorXd> lcm(log_cm[k].data(),
                                                static_cast<Eigen::Index>(log_cm[k].size()));
    log_mass(k) = log_sum_exp(lcm);
    if (std::isfinite(log_mass(k))) {
      const double local = lcm.maxCoeff();
      for (size_t c = 0; c < comps[k].size(); ++c)
        comps[k][c].weight = std::exp(log_cm[k][c] - local);
    }
  }

  const double shift = log_mass.maxCoeff();  // -inf when nothing kept any mass
  if (!std::isfinite(shift))
    throw ZeroMass("measurement_update_gamma: posterior mass underflow");
  const double t1s = (log_mass.array() - shift).exp().sum();
  const double t0 = kappa(0) * (1.0 - ps.existence);

  PotentialSource out;
  out.id = ps.id;
  out.origin = ps.origin;
  if (t0 > 0.0) {
    // t0/t1 through logs; overflow to +inf cleanly maps to existence 0
    const double ratio = std::exp(std::log(t0) - shift - std::log(t1s));
    out.existence = 1.0 / (1.0 + ratio);
  } else {
    out.existence = 1.0;
  }
  out.existence = std::min(out.existence, 1.0 - 1e-12);

  for (int k = 0; k < K; ++k) {
    if (!std::isfinite(log_mass(k))) continue;
    GaussianKernel rk = merge_kernels(comps[k], cfg.refit_min_std);
    rk.weight = std::exp(log_mass(k) - shift);
    out.belief.kernels.push_back(std::move(rk));
  }
  if (out.belief.kernels.empty())
    throw ZeroMass("measurement_update_gamma: all kernels lost their mass");

  if (keep_particles) {
    // Spatial diagnostic: the union cloud of every kernel's prior and flowed
    // particles, importance-weighted, normalized across kernels by its own
    // total so the stored sets form one distribution.
    std::vector<ParticleSet> unions;
    Eigen::VectorXd is_mass = Eigen::VectorXd::Constant(K, neg_inf);
    std::vector<Eigen::VectorXd> logv;
    for (int k = 0; k < K; ++k) {
      const int np = flowed.prior_clouds[k].size();
      int total = np;
      for (int m = 0; m < M; ++m)
        if (flowed.flows[m][k].ok) total += flowed.flows[m][k].cloud.size();
      ParticleSet u;
      u.points.resize(ps.belief.kernels[k].mean.size(), total);
      Eigen::VectorXd lv(total);
      int at = 0;
      u.points.middleCols(at, np) = flowed.prior_clouds[k].points;
      lv.segment(at, np) =
          (flowed.prior_clouds[k].weights.array().log() + log_miss).matrix();
      at += np;
      for (int m = 0; m < M; ++m) {
        const FlowedCloud& fc = flowed.flows[m][k];
        if (!fc.ok) continue;
        const int nf = fc.cloud.size();
        u.points.middleCols(at, nf) = fc.cloud.points;
        lv.segment(at, nf) = (fc.log_w + fc.log_lr).array() + std::log(kappa(m + 1));
        at += nf;
      }
      is_mass(k) = log_sum_exp(lv);
      unions.push_back(std::move(u));
      logv.push_back(std::move(lv));
    }
    const double is_shift = is_mass.maxCoeff();
    if (std::isfinite(is_shift)) {
      const double is_t1 = (is_mass.array() - is_shift).exp().sum();
      for (int k = 0; k < K; ++k) {
        if (!std::isfinite(log_mass(k))) continue;
        unions[k].weights = ((logv[k].array() - is_shift).exp() / is_t1).matrix();
        out.belief.particles.push_back(std::move(unions[k]));
      }
    }
  }
  out.belief.normalize();
  return out;
}

// ---- new PS creation ----

// One new PS per measurement: birth mixture on the measurement surface,
// flowed toward the measurement, existence from the two-event enumeration
// (birth vs clutter) tempered by the legacy claims in iota.
inline std::vector<PotentialSource> new_ps_belief(
    const MeasurementModel& model, const std::vector<double>& z,
    const MeasurementNorm& norm, const std::vector<Eigen::VectorXd>& iota,
    const DaConfig& cfg, const Roi& roi, const BirthParams& bp, FlowKind kind,
    const PseudoTimeSchedule& schedule, int n_particles, const RngPath& rng,
    int sensor_index, int first_id) {
  if (iota.size() != z.size())
    throw InvalidParam("new_ps_belief: iota does not match measurements");
  std::vector<PotentialSource> out;
  out.reserve(z.size());

  for (size_t m = 0; m < z.size(); ++m) {
    PotentialSource ps;
    ps.id = first_id + static_cast<int>(m);
    ps.origin = {sensor_index, static_cast<int>(m)};

    double legacy_claims = 0.0;
    for (int j = 1; j < iota[m].size(); ++j) legacy_claims += iota[m](j);
    const double birth = iota[m](0) * norm.birth_mass[m];
    const double rest = iota[m](0) * norm.clutter_mass[m] + legacy_claims;
    ps.existence =
        norm.usable[m] && birth > 0.0
            ? std::min(birth / (birth + rest), 1.0 - 1e-12)
            : 0.0;

    auto birth_engine = rng.child(stream::kBirth).child(m).engine();
    GmmBelief prior;
    try {
      prior = init_birth_gmm(z[m], model, roi, bp, birth_engine);
    } catch (const EmptyIntersection&) {
      // no support: keep a placeholder belief, existence forced to zero
      GaussianKernel k;
      k.mean = 0.5 * (roi.lo + roi.hi);
      k.cov = ((roi.hi - roi.lo) * 0.5).cwiseAbs2().asDiagonal();
      k.weight = 1.0;
      ps.existence = 0.0;
      ps.belief.kernels.push_back(std::move(k));
      out.push_back(std::move(ps));
      continue;
    }

    // refine each kernel toward the measurement with the chosen flow
    GmmBelief refined;
    std::vector<double> log_kw;  // log kernel masses, shifted before exp
    for (size_t k = 0; k < prior.kernels.size(); ++k) {
      const GaussianKernel& kern = prior.kernels[k];
      try {
        auto engine =
            rng.child(stream::kBirth).child(m).child(stream::kSampling).child(k).engine();
        ParticleSet cloud = sample_kernel(kern, n_particles, engine);
        const CholeskyGaussian prior_pdf(kern.mean, kern.cov);
        const ModelProvider provider = [&](const Eigen::VectorXd& xbar) {
          return linearize(model, z[m], xbar, kern.mean, kern.cov);
        };
        auto flow_engine =
            rng.child(stream::kBirth).child(m).child(stream::kLegacyFlow).child(k).engine();
        const MigrationResult mig =
            migrate(cloud, provider, schedule, kind, kern.mean, &flow_engine);

        // Kernel shape: exact conjugate update at the flowed linearization
        // for the tracked kinds, tempered moment refit for the per-particle
        // kind. Kernel mass from the evidence of the linearized model,
        // N(z_eff; H mu, H P H' + R): the particle estimate of the mass
        // drops to the noise floor whenever no particle lands inside the
        // likelihood band, which starves every kernel that is merely close.
        Eigen::VectorXd logw = prior_pdf.log_pdf_batch(mig.particles.points) +
                               cloud.weights.array().log().matrix();
        if (kind == FlowKind::Gromov) {
          const CholeskyGaussian proposal(mig.mu1, mig.sigma1);
          logw -= proposal.log_pdf_batch(mig.particles.points);
        } else {
          logw += mig.log_theta - prior_pdf.log_pdf_batch(cloud.points);
        }
        for (int i = 0; i < n_particles; ++i)
          logw(i) += model.log_likelihood(z[m], mig.particles.points.col(i));
        if (logw.hasNaN() || logw.maxCoeff() > std::numeric_limits<double>::max())
          continue;

        // Kernel shape: tempered moment refit while the importance weights
        // stay healthy; the tracked kinds fall back to the conjugate update
        // at the flowed linearization when they degenerate.
        const bool analytic =
            mig.mu1.size() != 0 && log_weight_ess(logw) < kRefitMinEss;
        GaussianKernel rk;
        LinearizedModel lin1;
        if (analytic) {
          lin1 = provider(mig.mu1);
        } else {
          ParticleSet post;
          post.points = mig.particles.points;
          post.weights = tempered_weights(logw, kRefitMinEss);
          rk = refit_kernel(post, cfg.refit_min_std);
          lin1 = provider(rk.mean);
        }
        const SlrResidual slr = slr_residual(model, z[m], lin1, kern.mean, kern.cov);
        const double r_eff = lin1.R(0, 0) + slr.var;
        const Eigen::VectorXd PHt = kern.cov * lin1.H.transpose();
        const double s_ev = (lin1.H * PHt)(0) + r_eff;
        const double pred = (lin1.H * kern.mean)(0);
        const double z_used = lin1.z(0) - slr.bias;
        if (analytic) {
          const Eigen::VectorXd gain = PHt / s_ev;
          rk.mean = kern.mean + gain * (z_used - pred);
          const Eigen::MatrixXd ikh =
              Eigen::MatrixXd::Identity(kern.mean.size(), kern.mean.size()) -
              gain * lin1.H;
          rk.cov = floor_cov(ikh * kern.cov * ikh.transpose() +
                                 r_eff * gain * gain.transpose(),
                             cfg.refit_min_std);
        }
        rk.weight = 0.0;  // placeholder, assigned after the shared shift
        log_kw.push_back(std::log(kern.weight) + log_normal_pdf(z_used, pred, s_ev));
        refined.kernels.push_back(std::move(rk));
      } catch (const Error&) {
        continue;  // failed kernel contributes nothing
      }
    }
    if (!refined.kernels.empty()) {
      const double shift = *std::max_element(log_kw.begin(), log_kw.end());
      for (size_t k = 0; k < refined.kernels.size(); ++k)
        refined.kernels[k].weight = std::exp(log_kw[k] - shift);
    }
    if (refined.kernels.empty() || !(refined.total_weight() > 0.0)) {
      ps.belief = std::move(prior);  // fall back to the unflowed mixture
    } else {
      refined.normalize();
      ps.belief = std::move(refined);
    }
    out.push_back(std::move(ps));
  }
  return out;
}

inline std::vector<PotentialSource> prune(std::vector<PotentialSource> list,
                                          double threshold) {
  std::erase_if(list, [&](const PotentialSource& p) { return p.existence < threshold; });
  return list;
}

}  // namespace pfloc
