#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "pfloc/errors.hpp"
#include "pfloc/gaussian.hpp"
#include "pfloc/model.hpp"

namespace pfloc {

// ---- pseudo-time grid ----

enum class ScheduleKind { Uniform, Geometric };

// Knots 0 = lambda_0 < lambda_1 < ... < lambda_L = 1. Step l (1-based in the
// math, 0-based here) runs from knot l to knot l+1.
struct PseudoTimeSchedule {
  std::vector<double> knots;

  int steps() const { return static_cast<int>(knots.size()) - 1; }
  double delta(int l) const { return knots[l + 1] - knots[l]; }
  double lambda_after(int l) const { return knots[l + 1]; }

  void validate() const {
    if (knots.size() < 2 || knots.front() != 0.0 || knots.back() != 1.0)
      throw InvalidParam("PseudoTimeSchedule: knots must run from 0 to 1");
    for (size_t i = 1; i < knots.size(); ++i)
      if (!(knots[i] > knots[i - 1]))
        throw InvalidParam("PseudoTimeSchedule: knots must be strictly increasing");
  }
};

// Geometric schedules put the fine steps early, where the flow is stiffest;
// ratio is the factor between consecutive step sizes (1 = uniform).
inline PseudoTimeSchedule lambda_schedule(int n_steps, ScheduleKind kind, double ratio = 2.0) {
  if (n_steps < 1) throw InvalidParam("lambda_schedule: need at least one step");
  PseudoTimeSchedule s;
  s.knots.resize(n_steps + 1);
  s.knots[0] = 0.0;
  if (kind == ScheduleKind::Uniform || ratio == 1.0) {
    for (int l = 1; l <= n_steps; ++l) s.knots[l] = static_cast<double>(l) / n_steps;
  } else {
    if (!(ratio > 0.0)) throw InvalidParam("lambda_schedule: ratio must be positive");
    const double d1 = (ratio - 1.0) / (std::pow(ratio, n_steps) - 1.0);
    double acc = 0.0, step = d1;
    for (int l = 1; l <= n_steps; ++l, step *= ratio) s.knots[l] = (acc += step);
  }
  s.knots[n_steps] = 1.0;
  s.validate();
  return s;
}

// ---- flow parameters ----

enum class FlowKind { Edh, Ledh, Gromov };

// One step of the homotopy ODE/SDE dx = (A x + b) dlambda + dW, cov(dW) = Q dlambda.
struct FlowParams {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::MatrixXd Q;
};

// Exact-flow drift for linear-Gaussian (z = Hx + v):
//   A = -1/2 P H' (lambda H P H' + R)^-1 H
//   b = (I + 2 lambda A) [ (I + lambda A) P H' R^-1 z + A mu0 ]
// Deterministic, Q = 0.
inline FlowParams edh_params(const LinearizedModel& lin, double lambda) {
  const int d = static_cast<int>(lin.mu0.size());
  const Eigen::MatrixXd PHt = lin.P * lin.H.transpose();
  Eigen::MatrixXd S = lambda * lin.H * PHt + lin.R;
  Eigen::LLT<Eigen::MatrixXd> sllt(S);
  if (sllt.info() != Eigen::Success)
    throw SingularMatrix("edh_params: innovation matrix not invertible");
  Eigen::LLT<Eigen::MatrixXd> rllt(lin.R);
  if (rllt.info() != Eigen::Success)
    throw SingularMatrix("edh_params: measurement noise not invertible");

  FlowParams fp;
  fp.A = -0.5 * PHt * sllt.solve(lin.H);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  fp.b = (I + 2.0 * lambda * fp.A) *
         ((I + lambda * fp.A) * PHt * rllt.solve(lin.z) + fp.A * lin.mu0);
  fp.Q = Eigen::MatrixXd::Zero(d, d);
  return fp;
}

// Stochastic-flow drift and diffusion:
//   M = (P^-1 + lambda H' R^-1 H)^-1,
//   A = -M H' R^-1 H, b = M H' R^-1 z, Q = M H' R^-1 H M.
// Expanding M by Woodbury gives M H' = P H' S^-1 R with S = lambda H P H' + R,
// so everything reduces to products of P H' and S^-1 with no cancellation.
// (Forming M G M directly is catastrophic once lambda H P H' >> R: the true Q
// is orders of magnitude below the intermediate terms and the roundoff
// residue comes out indefinite.)
inline FlowParams gromov_params(const LinearizedModel& lin, double lambda) {
  const Eigen::MatrixXd PHt = lin.P * lin.H.transpose();
  Eigen::MatrixXd S = lambda * lin.H * PHt + lin.R;
  Eigen::LLT<Eigen::MatrixXd> sllt(S);
  if (sllt.info() != Eigen::Success)
    throw SingularMatrix("gromov_params: innovation matrix not invertible");
  Eigen::LLT<Eigen::MatrixXd> rllt(lin.R);
  if (rllt.info() != Eigen::Success)
    throw SingularMatrix("gromov_params: measurement noise not invertible");

  FlowParams fp;
  fp.A = -PHt * sllt.solve(lin.H);                       // -M H' R^-1 H
  fp.b = PHt * sllt.solve(lin.z);                        //  M H' R^-1 z
  const Eigen::MatrixXd W = PHt * sllt.solve(lin.R);     //  M H'
  fp.Q = W * rllt.solve(W.transpose());
  fp.Q = 0.5 * (fp.Q + fp.Q.transpose());
  return fp;
}

inline FlowParams flow_params(FlowKind kind, const LinearizedModel& lin, double lambda) {
  switch (kind) {
    case FlowKind::Edh:
    case FlowKind::Ledh:
      return edh_params(lin, lambda);
    case FlowKind::Gromov:
      return gromov_params(lin, lambda);
  }
  throw InvalidFlowKind("flow_params: unknown flow kind");
}

// ---- particle migration ----

struct ParticleSet {
  Eigen::MatrixXd points;   // d x N, one column per particle
  Eigen::VectorXd weights;  // N

  int size() const { return static_cast<int>(points.cols()); }
  int dim() const { return static_cast<int>(points.rows()); }

  void validate() const {
    if (points.cols() != weights.size())
      throw InvalidParam("ParticleSet: points/weights size mismatch");
    if (!points.allFinite() || !weights.allFinite() || (weights.array() < 0.0).any())
      throw InvalidParam("ParticleSet: non-finite or negative entries");
  }
};

// Produces the local linear-Gaussian view at a requested linearization point;
// the prior (mu0, P) and the measurement are baked in by the caller.
using ModelProvider = std::function<LinearizedModel(const Eigen::VectorXd& xbar)>;

struct MigrationResult {
  ParticleSet particles;
  // log of the per-particle mapping factor theta (product over steps of
  // |det(I + delta A)|); for the globally linearized kinds every particle
  // shares one value.
  Eigen::VectorXd log_theta;
  // moments propagated alongside the flow (drift-only mean path); for LEDH
  // there is no single track, so these stay empty.
  Eigen::VectorXd mu1;
  Eigen::MatrixXd sigma1;
};

namespace detail {

inline double log_abs_det_step(const Eigen::MatrixXd& A, double delta) {
  const int d = static_cast<int>(A.rows());
  const double det = (Eigen::MatrixXd::Identity(d, d) + delta * A).determinant();
  if (det <= 0.0)
    throw StiffFlow("particle flow step produced a non-positive map determinant");
  return std::log(det);
}

}  // namespace detail

// Euler migration of a particle cloud through the measurement-inclusion
// homotopy. Gromov adds the Euler-Maruyama diffusion term and needs an
// engine; the deterministic kinds ignore it. The linearization travels with
// the drift-only tracked mean (per particle for LEDH). Parameters of step l
// are evaluated at the end knot lambda_l of that step.
inline MigrationResult migrate(const ParticleSet& in, const ModelProvider& provider,
                               const PseudoTimeSchedule& schedule, FlowKind kind,
                               const Eigen::VectorXd& linearization_start,
                               std::mt19937_64* rng = nullptr) {
  in.validate();
  schedule.validate();
  const int d = in.dim();
  const int n = in.size();
  if (kind == FlowKind::Gromov && rng == nullptr)
    throw InvalidParam("migrate: stochastic flow needs an rng stream");

  MigrationResult out;
  out.particles = in;
  out.log_theta = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd& X = out.particles.points;

  std::normal_distribution<double> gauss(0.0, 1.0);

  if (kind == FlowKind::Ledh) {
    // per-particle linearization and mapping factor
    for (int l = 0; l < schedule.steps(); ++l) {
      const double lam = schedule.lambda_after(l);
      const double del = schedule.delta(l);
      for (int i = 0; i < n; ++i) {
        const LinearizedModel lin = provider(X.col(i));
        const FlowParams fp = edh_params(lin, lam);
        out.log_theta(i) += detail::log_abs_det_step(fp.A, del);
        X.col(i) += del * (fp.A * X.col(i) + fp.b);
      }
      if (!X.allFinite()) throw NonFiniteState("migrate: particle left the finite domain");
    }
    return out;
  }

  Eigen::VectorXd mean = linearization_start;
  if (mean.size() != d) throw InvalidParam("migrate: bad linearization start");
  const LinearizedModel lin0 = provider(mean);
  Eigen::MatrixXd sigma = lin0.P;

  for (int l = 0; l < schedule.steps(); ++l) {
    const double lam = schedule.lambda_after(l);
    const double del = schedule.delta(l);
    const LinearizedModel lin = provider(mean);
    const FlowParams fp = flow_params(kind, lin, lam);

    const double log_det = detail::log_abs_det_step(fp.A, del);
    if (kind == FlowKind::Edh) out.log_theta.array() += log_det;

    X = (X + del * (fp.A * X)).eval();
    X.colwise() += del * fp.b;
    if (kind == FlowKind::Gromov) {
      Eigen::MatrixXd noise(d, n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < d; ++i) noise(i, j) = gauss(*rng);
      X += std::sqrt(del) * (psd_sqrt(fp.Q) * noise);
    }
    if (!X.allFinite()) throw NonFiniteState("migrate: particle left the finite domain");

    mean += del * (fp.A * mean + fp.b);
    const Eigen::MatrixXd F = Eigen::MatrixXd::Identity(d, d) + del * fp.A;
    sigma = (F * sigma * F.transpose() + del * fp.Q).eval();
  }

  out.mu1 = mean;
  out.sigma1 = 0.5 * (sigma + sigma.transpose());
  return out;
}

// Drift-only moment propagation along the same grid the particles use:
//   mu    <- mu + delta (A mu + b)
//   Sigma <- (I + delta A) Sigma (I + delta A)' + delta Q
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> propagate_moments(
    const Eigen::VectorXd& mu0, const Eigen::MatrixXd& sigma0, const ModelProvider& provider,
    const PseudoTimeSchedule& schedule, FlowKind kind) {
  schedule.validate();
  if (kind == FlowKind::Ledh) kind = FlowKind::Edh;  // same parameterization along one track
  const int d = static_cast<int>(mu0.size());
  Eigen::VectorXd mu = mu0;
  Eigen::MatrixXd sigma = sigma0;
  for (int l = 0; l < schedule.steps(); ++l) {
    const double lam = schedule.lambda_after(l);
    const double del = schedule.delta(l);
    const FlowParams fp = flow_params(kind, provider(mu), lam);
    const Eigen::MatrixXd F = Eigen::MatrixXd::Identity(d, d) + del * fp.A;
    sigma = (F * sigma * F.transpose() + del * fp.Q).eval();
    mu += del * (fp.A * mu + fp.b);
  }
  if (!mu.allFinite() || !sigma.allFinite())
    throw NonFiniteState("propagate_moments: moments left the finite domain");
  return {mu, 0.5 * (sigma + sigma.transpose())};
}

// Mapping factor of a recorded parameter sequence (one entry per step).
inline double mapping_factor(const std::vector<FlowParams>& steps,
                             const PseudoTimeSchedule& schedule) {
  if (static_cast<int>(steps.size()) != schedule.steps())
    throw InvalidParam("mapping_factor: one parameter set per step required");
  double log_theta = 0.0;
  for (int l = 0; l < schedule.steps(); ++l)
    log_theta += detail::log_abs_det_step(steps[l].A, schedule.delta(l));
  return std::exp(log_theta);
}

}  // namespace pfloc
