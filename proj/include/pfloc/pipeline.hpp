#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pfloc/association.hpp"
#include "pfloc/errors.hpp"
#include "pfloc/flow.hpp"
#include "pfloc/geometry.hpp"
#include "pfloc/gmm.hpp"
#include "pfloc/model.hpp"
#include "pfloc/rng.hpp"

namespace pfloc {

enum class Method { Pm, Edh, Ledh, Gromov };

inline FlowKind method_flow(Method m) {
  switch (m) {
    case Method::Edh:
      return FlowKind::Edh;
    case Method::Ledh:
      return FlowKind::Ledh;
    case Method::Gromov:
      return FlowKind::Gromov;
    default:
      throw InvalidFlowKind("method_flow: bootstrap method has no flow");
  }
}

struct MethodConfig {
  Method method = Method::Edh;
  int n_kernels = 100;          // kernels per birth mixture
  int legacy_particles = 1000;  // per kernel, existing sources
  int birth_particles = 1000;   // per kernel, newly born sources
  int n_lambda = 30;
  // Geometric pseudo-time: at realistic noise the prior-to-posterior
  // transition happens around lambda ~ R/(H P H') which can sit many decades
  // below 1; uniform spacing steps straight over it.
  ScheduleKind schedule_kind = ScheduleKind::Geometric;
  double geometric_ratio = 2.0;
  int bootstrap_samples = 200000;  // cloud size for the prior-message baseline

  void validate() const {
    if (method != Method::Pm) {
      if (n_kernels < 1) throw InvalidParam("method: n_kernels must be >= 1");
      if (legacy_particles < 1 || birth_particles < 1)
        throw InvalidParam("method: particle counts must be >= 1");
      if (n_lambda < 1) throw InvalidParam("method: n_lambda must be >= 1");
      if (schedule_kind == ScheduleKind::Geometric && geometric_ratio <= 1.0)
        throw InvalidParam("method: geometric ratio must exceed 1");
    } else if (bootstrap_samples < 1) {
      throw InvalidParam("method: bootstrap_samples must be >= 1");
    }
  }

  PseudoTimeSchedule schedule() const {
    return lambda_schedule(n_lambda, schedule_kind, geometric_ratio);
  }
};

struct PipelineConfig {
  Medium medium;
  Roi roi;
  DaConfig da;
  BirthParams birth;
  double p_th = 0.5;
  double prune_threshold = 1e-3;

  void validate() const {
    medium.validate();
    roi.validate();
    da.validate();
    if (p_th <= 0.0 || p_th >= 1.0) throw InvalidParam("pipeline: p_th must be in (0,1)");
    if (prune_threshold < 0.0 || prune_threshold >= 1.0)
      throw InvalidParam("pipeline: prune threshold must be in [0,1)");
  }
};

struct SourceEstimate {
  Vec3 position = Vec3::Zero();
  double existence = 0.0;
  int ps_id = 0;
};

struct SensorDiagnostics {
  int sensor_index = 0;  // 1-based position in the processing order
  int n_measurements = 0;
  int legacy_in = 0;
  int born = 0;
  int kept = 0;
  int bp_iterations = 0;
  bool bp_converged = true;
  int flow_failures = 0;
  bool failed = false;
  std::string message;
};

struct EstimatorState {
  int sensors_processed = 0;
  int next_ps_id = 1;
  std::vector<PotentialSource> sources;

  void validate() const {
    std::unordered_set<int> ids;
    for (const auto& ps : sources) {
      ps.validate();
      if (!ids.insert(ps.id).second)
        throw ValidationError("estimator state: duplicate source id");
    }
  }
};

namespace detail {

inline BirthSampler roi_sampler(const Roi& roi) {
  return [&roi](std::mt19937_64& rng) { return Eigen::VectorXd(roi.sample(rng)); };
}

// Beliefs may wander arbitrarily close to a receiver where the measurement
// map is singular; nudge offending kernel means off the poles.
inline void clamp_kernels(GmmBelief& belief, const SensorPair& pair) {
  for (auto& k : belief.kernels) {
    if (k.mean.size() != 3) return;
    k.mean = clamp_off_receivers(Vec3(k.mean), pair);
  }
}

// existence-only decay when a sensor produced no measurements
inline double missed_existence(double alpha, double p_d) {
  const double miss = alpha * (1.0 - p_d);
  return std::min(miss / (miss + 1.0 - alpha + 1e-300), 1.0 - 1e-12);
}

}  // namespace detail

struct ProcessResult {
  EstimatorState state;
  SensorDiagnostics diag;
};

// One full measurement-update round for one sensor: embedded flows feed the
// association fixed point, whose weights feed the belief updates and births.
inline ProcessResult process_sensor(const EstimatorState& in, const SensorScan& scan,
                                    const PipelineConfig& cfg, const MethodConfig& method,
                                    const RngPath& sensor_path) {
  cfg.validate();
  method.validate();
  in.validate();
  const FlowKind kind = method_flow(method.method);
  const PseudoTimeSchedule schedule = method.schedule();
  const TdoaSensorModel model(scan.pair, cfg.medium);
  const std::vector<double>& z = scan.measurements;
  const int M = static_cast<int>(z.size());
  const int J = static_cast<int>(in.sources.size());

  ProcessResult out;
  out.diag.sensor_index = in.sensors_processed + 1;
  out.diag.n_measurements = M;
  out.diag.legacy_in = J;
  out.state.sensors_processed = in.sensors_processed + 1;
  out.state.next_ps_id = in.next_ps_id;

  if (M == 0) {
    out.state.sources = in.sources;
    for (auto& ps : out.state.sources)
      ps.existence = detail::missed_existence(ps.existence, cfg.da.p_d);
    out.state.sources = prune(std::move(out.state.sources), cfg.prune_threshold);
    out.diag.kept = static_cast<int>(out.state.sources.size());
    return out;
  }

  const BirthSampler sampler = detail::roi_sampler(cfg.roi);
  auto norm_rng = sensor_path.child(stream::kBirthExpectation).engine();
  const MeasurementNorm norm =
      measurement_norm(model, z, cfg.da, sampler, norm_rng);

  AssociationTables tables;
  std::vector<FlowedBeta> flowed;
  flowed.reserve(J);
  for (const auto& ps : in.sources) {
    flowed.push_back(flow_embedded_beta(ps, model, z, norm, cfg.da, kind, schedule,
                                        method.legacy_particles,
                                        sensor_path.child(ps.id)));
    out.diag.flow_failures += flowed.back().flow_failures;
    tables.beta.push_back(flowed.back().beta);
  }
  tables.xi = new_ps_xi(norm, J);

  const DaResult da = da_fixed_point(tables, cfg.da);
  out.diag.bp_converged = da.converged;
  out.diag.bp_iterations = da.iters;

  for (int j = 0; j < J; ++j) {
    PotentialSource upd;
    try {
      upd = measurement_update_gamma(in.sources[j], da.kappa[j], flowed[j], cfg.da);
    } catch (const ZeroMass&) {
      upd = in.sources[j];
      upd.existence = 0.0;
    }
    detail::clamp_kernels(upd.belief, scan.pair);
    out.state.sources.push_back(std::move(upd));
  }

  std::vector<PotentialSource> born =
      new_ps_belief(model, z, norm, da.iota, cfg.da, cfg.roi, cfg.birth, kind, schedule,
                    method.birth_particles, sensor_path, out.diag.sensor_index,
                    in.next_ps_id);
  out.diag.born = static_cast<int>(born.size());
  out.state.next_ps_id = in.next_ps_id + out.diag.born;
  for (auto& ps : born) {
    detail::clamp_kernels(ps.belief, scan.pair);
    out.state.sources.push_back(std::move(ps));
  }

  if (static_cast<int>(out.state.sources.size()) != J + M)
    throw ValidationError("process_sensor: source count must be legacy + measurements");

  out.state.sources = prune(std::move(out.state.sources), cfg.prune_threshold);
  out.diag.kept = static_cast<int>(out.state.sources.size());
  return out;
}

// Prior-message baseline: one flat weighted cloud per source, refreshed by
// resampling, weighted directly by the likelihood factors. No flow.
inline ProcessResult bootstrap_update(const EstimatorState& in, const SensorScan& scan,
                                      const PipelineConfig& cfg, int n_samples,
                                      const RngPath& sensor_path) {
  cfg.validate();
  in.validate();
  if (n_samples < 1) throw InvalidParam("bootstrap_update: n_samples must be >= 1");
  const TdoaSensorModel model(scan.pair, cfg.medium);
  const std::vector<double>& z = scan.measurements;
  const int M = static_cast<int>(z.size());
  const int J = static_cast<int>(in.sources.size());
  const double p_d = cfg.da.p_d;

  ProcessResult out;
  out.diag.sensor_index = in.sensors_processed + 1;
  out.diag.n_measurements = M;
  out.diag.legacy_in = J;
  out.state.sensors_processed = in.sensors_processed + 1;
  out.state.next_ps_id = in.next_ps_id;

  if (M == 0) {
    out.state.sources = in.sources;
    for (auto& ps : out.state.sources)
      ps.existence = detail::missed_existence(ps.existence, p_d);
    out.state.sources = prune(std::move(out.state.sources), cfg.prune_threshold);
    out.diag.kept = static_cast<int>(out.state.sources.size());
    return out;
  }

  const BirthSampler sampler = detail::roi_sampler(cfg.roi);
  auto norm_rng = sensor_path.child(stream::kBirthExpectation).engine();
  const MeasurementNorm norm = measurement_norm(model, z, cfg.da, sampler, norm_rng);

  // resample each prior cloud, then evaluate every likelihood once
  std::vector<ParticleSet> clouds(J);
  std::vector<Eigen::MatrixXd> lik(J);  // [j](m, i)
  AssociationTables tables;
  for (int j = 0; j < J; ++j) {
    const PotentialSource& ps = in.sources[j];
    const ParticleSet& prior = ps.belief.particles.at(0);
    auto rng = sensor_path.child(stream::kResample).child(ps.id).engine();
    const std::vector<int> picks = systematic_resample(prior.weights, n_samples, rng);
    clouds[j].points.resize(prior.dim(), n_samples);
    for (int i = 0; i < n_samples; ++i)
      clouds[j].points.col(i) = prior.points.col(picks[i]);
    clouds[j].weights = Eigen::VectorXd::Constant(n_samples, 1.0 / n_samples);

    lik[j].resize(M, n_samples);
    const Eigen::VectorXd pred = model.predict_batch(clouds[j].points);
    for (int m = 0; m < M; ++m)
      for (int i = 0; i < n_samples; ++i)
        lik[j](m, i) = normal_pdf(z[m], pred(i), model.noise_var());

    Eigen::VectorXd beta(M + 1);
    const double alpha = ps.existence;
    beta(0) = (1.0 - p_d) * alpha + (1.0 - alpha);
    for (int m = 0; m < M; ++m)
      beta(m + 1) = norm.usable[m]
                        ? alpha * p_d * lik[j].row(m).mean() / norm.denom[m]
                        : 0.0;
    tables.beta.push_back(beta);
  }
  tables.xi = new_ps_xi(norm, J);

  const DaResult da = da_fixed_point(tables, cfg.da);
  out.diag.bp_converged = da.converged;
  out.diag.bp_iterations = da.iters;

  for (int j = 0; j < J; ++j) {
    PotentialSource upd = in.sources[j];
    const double alpha = upd.existence;
    const Eigen::VectorXd& kappa = da.kappa[j];
    Eigen::VectorXd w1 =
        Eigen::VectorXd::Constant(n_samples, kappa(0) * (1.0 - p_d) / n_samples);
    for (int m = 0; m < M; ++m) {
      if (!norm.usable[m]) continue;
      w1 += (kappa(m + 1) * p_d / (norm.denom[m] * n_samples)) *
            lik[j].row(m).transpose();
    }
    const double t1 = alpha * w1.sum();
    const double t0 = (1.0 - alpha) * kappa(0);
    if (t1 + t0 <= 0.0 || w1.sum() <= 0.0) {
      upd.existence = 0.0;
    } else {
      upd.existence = std::min(t1 / (t1 + t0), 1.0 - 1e-12);
      ParticleSet post = clouds[j];
      post.weights = w1 / w1.sum();
      upd.belief.kernels = {refit_kernel(post, cfg.da.refit_min_std)};
      upd.belief.kernels[0].weight = 1.0;
      upd.belief.particles = {std::move(post)};
    }
    out.state.sources.push_back(std::move(upd));
  }

  // births: uniform candidates weighted by the measurement likelihood
  for (int m = 0; m < M; ++m) {
    PotentialSource ps;
    ps.id = out.state.next_ps_id++;
    ps.origin.sensor = out.diag.sensor_index;
    ps.origin.measurement = m + 1;

    const double birth = da.iota[m](0) * norm.birth_mass[m];
    double rest = da.iota[m](0) * norm.clutter_mass[m];
    for (int j = 1; j < da.iota[m].size(); ++j) rest += da.iota[m](j);
    ps.existence =
        birth > 0.0 ? std::min(birth / (birth + rest), 1.0 - 1e-12) : 0.0;

    ParticleSet cloud;
    cloud.points.resize(3, n_samples);
    auto rng = sensor_path.child(stream::kBirth).child(m + 1).engine();
    for (int i = 0; i < n_samples; ++i) cloud.points.col(i) = cfg.roi.sample(rng);
    // softmax of log-likelihoods: the raw densities underflow at realistic
    // noise, but the normalized weights only need differences to the best
    const Eigen::VectorXd pred = model.predict_batch(cloud.points);
    const Eigen::ArrayXd logw =
        -0.5 * (z[m] - pred.array()).square() / model.noise_var();
    cloud.weights = (logw - logw.maxCoeff()).exp();
    cloud.weights /= cloud.weights.sum();
    ps.belief.kernels = {refit_kernel(cloud, cfg.da.refit_min_std)};
    ps.belief.kernels[0].weight = 1.0;
    ps.belief.particles = {std::move(cloud)};
    out.diag.born += 1;
    out.state.sources.push_back(std::move(ps));
  }

  if (static_cast<int>(out.state.sources.size()) != J + M)
    throw ValidationError("bootstrap_update: source count must be legacy + measurements");

  out.state.sources = prune(std::move(out.state.sources), cfg.prune_threshold);
  out.diag.kept = static_cast<int>(out.state.sources.size());
  return out;
}

inline std::vector<SourceEstimate> extract_estimates(const EstimatorState& state,
                                                     double p_th) {
  if (p_th <= 0.0 || p_th >= 1.0)
    throw InvalidParam("extract_estimates: threshold must be in (0,1)");
  std::vector<SourceEstimate> out;
  for (const auto& ps : state.sources) {
    if (ps.existence <= p_th) continue;
    SourceEstimate est;
    est.ps_id = ps.id;
    est.existence = ps.existence;
    const auto [mean, cov] = ps.belief.moments();
    (void)cov;
    if (mean.size() != 3)
      throw InvalidParam("extract_estimates: expected 3-D beliefs");
    est.position = Vec3(mean);
    out.push_back(est);
  }
  return out;
}

struct RunOutput {
  EstimatorState state;
  std::vector<SourceEstimate> estimates;
  std::vector<SensorDiagnostics> diagnostics;
};

// called after each sensor with the post-update state; for snapshot export
using SensorObserver = std::function<void(int sensor_index, const EstimatorState&)>;

inline RunOutput run_all_sensors(const std::vector<SensorScan>& scans,
                                 const PipelineConfig& cfg, const MethodConfig& method,
                                 std::uint64_t seed,
                                 const SensorObserver& observer = {}) {
  if (scans.empty()) throw InvalidParam("run_all_sensors: no scans");
  cfg.validate();
  method.validate();
  const RngPath root = RngPath(seed).child(stream::kRun);

  RunOutput out;
  for (size_t s = 0; s < scans.size(); ++s) {
    const RngPath sensor_path = root.child(static_cast<std::uint64_t>(s) + 1);
    try {
      ProcessResult step =
          method.method == Method::Pm
              ? bootstrap_update(out.state, scans[s], cfg, method.bootstrap_samples,
                                 sensor_path)
              : process_sensor(out.state, scans[s], cfg, method, sensor_path);
      out.state = std::move(step.state);
      out.diagnostics.push_back(std::move(step.diag));
    } catch (const Error& e) {
      SensorDiagnostics diag;
      diag.sensor_index = static_cast<int>(s) + 1;
      diag.n_measurements = static_cast<int>(scans[s].measurements.size());
      diag.legacy_in = static_cast<int>(out.state.sources.size());
      diag.kept = diag.legacy_in;
      diag.failed = true;
      diag.message = e.what();
      out.diagnostics.push_back(std::move(diag));
    }
    if (observer) observer(static_cast<int>(s) + 1, out.state);
  }
  out.estimates = extract_estimates(out.state, cfg.p_th);
  return out;
}

}  // namespace pfloc
