#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "pfloc/errors.hpp"
#include "pfloc/flow.hpp"
#include "pfloc/gaussian.hpp"
#include "pfloc/model.hpp"

namespace pfloc {

struct GaussianKernel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  double weight = 0.0;
};

// Mixture belief over source position. Particle clouds, when present, sit in
// parallel with the kernels they were drawn from.
struct GmmBelief {
  std::vector<GaussianKernel> kernels;
  std::vector<ParticleSet> particles;

  double total_weight() const {
    double s = 0.0;
    for (const auto& k : kernels) s += k.weight;
    return s;
  }

  void normalize() {
    const double s = total_weight();
    if (!(s > 0.0)) throw ZeroMass("GmmBelief: total kernel weight is zero");
    for (auto& k : kernels) k.weight /= s;
  }

  void validate() const {
    if (kernels.empty()) throw EmptyKernel("GmmBelief: no kernels");
    if (!particles.empty() && particles.size() != kernels.size())
      throw InvalidParam("GmmBelief: particle sets do not match kernels");
    for (const auto& k : kernels) {
      if (!(k.weight >= 0.0) || !k.mean.allFinite() || !k.cov.allFinite())
        throw InvalidParam("GmmBelief: non-finite kernel");
    }
  }

  // overall moments, spread between kernels included
  std::pair<Eigen::VectorXd, Eigen::MatrixXd> moments() const {
    if (kernels.empty()) throw EmptyKernel("GmmBelief::moments: no kernels");
    const int d = static_cast<int>(kernels.front().mean.size());
    const double s = total_weight();
    if (!(s > 0.0)) throw ZeroMass("GmmBelief::moments: zero weight");
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& k : kernels) mu += k.weight / s * k.mean;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& k : kernels) {
      const Eigen::VectorXd dm = k.mean - mu;
      cov += k.weight / s * (k.cov + dm * dm.transpose());
    }
    return {mu, cov};
  }
};

// Draw n equally weighted particles from one kernel; the returned weights
// carry the kernel mass, so unions over kernels keep mixture proportions.
inline ParticleSet sample_kernel(const GaussianKernel& k, int n, std::mt19937_64& rng) {
  if (n < 1) throw InvalidParam("sample_kernel: need at least one particle");
  CholeskyGaussian g(k.mean, k.cov);
  ParticleSet ps;
  ps.points = g.sample(n, rng);
  ps.weights = Eigen::VectorXd::Constant(n, k.weight / n);
  return ps;
}

// Flattens log weights just enough that the effective sample size reaches
// min_ess (or the cloud size, if smaller). Moment refits otherwise collapse
// onto a single particle when the weight range spans hundreds of orders of
// magnitude, which turns a spread-out belief into an overconfident point
// mass. Returns linear weights, shifted so the largest is 1.
inline Eigen::VectorXd tempered_weights(const Eigen::VectorXd& logw, double min_ess) {
  if (logw.size() == 0) throw InvalidParam("tempered_weights: empty cloud");
  const double target = std::min(min_ess, static_cast<double>(logw.size()));
  const Eigen::ArrayXd s =
      (logw.array() - logw.maxCoeff()).cwiseMax(-1e300);  // <= 0, -inf clamped
  const auto ess_at = [&](double inv_t) {
    const Eigen::ArrayXd w = (s * inv_t).exp();
    const double sum = w.sum();
    return sum * sum / (w * w).sum();
  };
  if (ess_at(1.0) >= target) return s.exp();
  double lo = 0.0, hi = 1.0;  // ess_at(0) = n >= target, monotone down in inv_t
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ess_at(mid) >= target ? lo : hi) = mid;
  }
  return (s * lo).exp();
}

// Symmetrize and clamp the eigenvalues so the result stays usable as a
// Cholesky prior even when a refit or moment track collapses a direction.
inline Eigen::MatrixXd floor_cov(Eigen::MatrixXd cov, double min_std) {
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double floor = min_std * min_std;
  if (es.eigenvalues().minCoeff() < floor) {
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    cov = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  }
  return cov;
}

// Moment-matched Gaussian of a weighted cloud.
inline GaussianKernel refit_kernel(const ParticleSet& ps, double min_std = 1e-5) {
  ps.validate();
  const double mass = ps.weights.sum();
  if (!(mass > 0.0)) throw EmptyKernel("refit_kernel: zero-mass cloud");
  GaussianKernel k;
  k.weight = mass;
  k.mean = ps.points * (ps.weights / mass);
  Eigen::MatrixXd centered = ps.points.colwise() - k.mean;
  k.cov = floor_cov(centered * (ps.weights / mass).asDiagonal() * centered.transpose(),
                    min_std);
  return k;
}

// Moment-matched Gaussian of a mixture of Gaussian components with linear
// masses (need not be normalized).
inline GaussianKernel merge_kernels(const std::vector<GaussianKernel>& comps,
                                    double min_std) {
  double mass = 0.0;
  for (const auto& c : comps) mass += c.weight;
  if (!(mass > 0.0)) throw EmptyKernel("merge_kernels: zero-mass mixture");
  const int d = static_cast<int>(comps.front().mean.size());
  GaussianKernel k;
  k.weight = mass;
  k.mean = Eigen::VectorXd::Zero(d);
  for (const auto& c : comps) k.mean += c.weight / mass * c.mean;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& c : comps) {
    const Eigen::VectorXd dm = c.mean - k.mean;
    cov += c.weight / mass * (c.cov + dm * dm.transpose());
  }
  k.cov = floor_cov(std::move(cov), min_std);
  return k;
}

// ---- birth mixture construction ----

struct BirthParams {
  int n_kernels = 100;
  // acceptance band around the measurement, as a multiple of the noise std
  double band_scale = 1000.0;
  int min_accepted = 800;
  long max_candidates = 2000000;
  int batch = 16384;
  int kmeans_iters = 10;
  double min_kernel_std = 1.0;  // meters
};

namespace detail {

// farthest-point seeding, then a few Lloyd iterations
inline std::vector<int> kmeans_labels(const Eigen::Matrix3Xd& pts, int k, int iters,
                                      std::mt19937_64& rng) {
  const int n = static_cast<int>(pts.cols());
  k = std::min(k, n);
  Eigen::Matrix3Xd centers(3, k);
  std::uniform_int_distribution<int> pick(0, n - 1);
  centers.col(0) = pts.col(pick(rng));
  Eigen::VectorXd best = (pts.colwise() - centers.col(0)).colwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    int far = 0;
    best.maxCoeff(&far);
    centers.col(c) = pts.col(far);
    best = best.cwiseMin((pts.colwise() - centers.col(c)).colwise().squaredNorm().transpose());
  }

  std::vector<int> label(n, 0);
  for (int it = 0; it < iters; ++it) {
    for (int j = 0; j < n; ++j) {
      double dbest = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d2 = (pts.col(j) - centers.col(c)).squaredNorm();
        if (d2 < dbest) {
          dbest = d2;
          label[j] = c;
        }
      }
    }
    Eigen::Matrix3Xd sums = Eigen::Matrix3Xd::Zero(3, k);
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(k);
    for (int j = 0; j < n; ++j) {
      sums.col(label[j]) += pts.col(j);
      counts(label[j]) += 1;
    }
    for (int c = 0; c < k; ++c)
      if (counts(c) > 0) centers.col(c) = sums.col(c) / counts(c);
  }
  return label;
}

}  // namespace detail

// Gaussian mixture over the region of the state space consistent with one
// measurement: uniform candidates over the ROI, kept with probability
// exp(-(h(x)-z)^2 / 2 sigma_band^2), then clustered into kernels. Weights
// follow cluster sizes.
inline GmmBelief init_birth_gmm(double z, const MeasurementModel& model, const Roi& roi,
                                const BirthParams& bp, std::mt19937_64& rng) {
  if (model.state_dim() != 3)
    throw InvalidParam("init_birth_gmm: needs a 3-d position model");
  if (bp.n_kernels < 1) throw InvalidParam("init_birth_gmm: need at least one kernel");
  roi.validate();

  const double band_var =
      bp.band_scale * bp.band_scale * model.noise_var();
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<Eigen::Vector3d> accepted;
  long seen = 0;
  while (seen < bp.max_candidates && static_cast<int>(accepted.size()) < bp.min_accepted) {
    const int m = static_cast<int>(std::min<long>(bp.batch, bp.max_candidates - seen));
    Eigen::Matrix3Xd cand(3, m);
    for (int j = 0; j < m; ++j) cand.col(j) = roi.sample(rng);
    const Eigen::VectorXd h = model.predict_batch(cand);
    for (int j = 0; j < m; ++j) {
      const double dz = h(j) - z;
      if (unif(rng) < std::exp(-0.5 * dz * dz / band_var)) accepted.push_back(cand.col(j));
    }
    seen += m;
  }
  if (accepted.empty())
    throw EmptyIntersection("init_birth_gmm: measurement surface does not meet the region");

  const int n = static_cast<int>(accepted.size());
  Eigen::Matrix3Xd pts(3, n);
  for (int j = 0; j < n; ++j) pts.col(j) = accepted[j];

  const int k = std::min(bp.n_kernels, n);
  const std::vector<int> label = detail::kmeans_labels(pts, k, bp.kmeans_iters, rng);

  GmmBelief out;
  for (int c = 0; c < k; ++c) {
    std::vector<int> members;
    for (int j = 0; j < n; ++j)
      if (label[j] == c) members.push_back(j);
    if (members.empty()) continue;
    ParticleSet cluster;
    cluster.points.resize(3, members.size());
    for (size_t j = 0; j < members.size(); ++j) cluster.points.col(j) = pts.col(members[j]);
    cluster.weights = Eigen::VectorXd::Constant(members.size(),
                                                1.0 / static_cast<double>(n));
    out.kernels.push_back(refit_kernel(cluster, bp.min_kernel_std));
  }
  if (out.kernels.empty())
    throw EmptyIntersection("init_birth_gmm: clustering produced no kernels");
  out.normalize();
  return out;
}

}  // namespace pfloc
