#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "pfloc/errors.hpp"

namespace pfloc {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

inline double log_normal_pdf(double x, double mean, double var) {
  if (!(var > 0.0)) throw InvalidParam("log_normal_pdf: variance must be positive");
  const double d = x - mean;
  return -0.5 * (kLogTwoPi + std::log(var) + d * d / var);
}

inline double normal_pdf(double x, double mean, double var) {
  return std::exp(log_normal_pdf(x, mean, var));
}

// Cholesky-backed multivariate normal: density evals (single and batched over
// columns) and sampling share one factorization.
class CholeskyGaussian {
 public:
  CholeskyGaussian(Eigen::VectorXd mean, const Eigen::MatrixXd& cov)
      : mean_(std::move(mean)), llt_(cov) {
    if (cov.rows() != cov.cols() || cov.rows() != mean_.size())
      throw InvalidParam("CholeskyGaussian: dimension mismatch");
    if (llt_.info() != Eigen::Success)
      throw NonPositiveDefinite("CholeskyGaussian: covariance not positive definite");
    const Eigen::MatrixXd L = llt_.matrixL();
    log_norm_ = -0.5 * mean_.size() * kLogTwoPi - L.diagonal().array().log().sum();
  }

  const Eigen::VectorXd& mean() const { return mean_; }

  double log_pdf(const Eigen::VectorXd& x) const {
    Eigen::VectorXd d = x - mean_;
    llt_.matrixL().solveInPlace(d);
    return log_norm_ - 0.5 * d.squaredNorm();
  }

  double pdf(const Eigen::VectorXd& x) const { return std::exp(log_pdf(x)); }

  // points are columns
  Eigen::VectorXd log_pdf_batch(const Eigen::MatrixXd& pts) const {
    Eigen::MatrixXd d = pts.colwise() - mean_;
    llt_.matrixL().solveInPlace(d);
    return (log_norm_ - 0.5 * d.colwise().squaredNorm().array()).transpose();
  }

  Eigen::MatrixXd sample(int n, std::mt19937_64& rng) const {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd pts(mean_.size(), n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < mean_.size(); ++i) pts(i, j) = gauss(rng);
    pts = llt_.matrixL() * pts;
    pts.colwise() += mean_;
    return pts;
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double log_norm_;
};

// Symmetric PSD square root via eigendecomposition; small negative eigenvalues
// from roundoff are clamped to zero. Used where the matrix may be singular
// (diffusion matrices), unlike the strict Cholesky above.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double rel_tol = 1e-6) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NonPositiveDefinite("psd_sqrt: eigensolver failed");
  Eigen::VectorXd ev = es.eigenvalues();
  // inputs are PSD by construction; products like M H' R^-1 H M reach huge
  // dynamic ranges, so roundoff negatives scale with the top eigenvalue
  const double floor = -rel_tol * std::max(0.0, ev.maxCoeff());
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) < floor) throw NonPositiveDefinite("psd_sqrt: matrix has negative eigenvalues");
    ev(i) = std::max(ev(i), 0.0);
  }
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

inline double effective_sample_size(const Eigen::VectorXd& w) {
  const double s = w.sum();
  if (!(s > 0.0)) throw ZeroMass("effective_sample_size: weights sum to zero");
  const double s2 = w.squaredNorm();
  return s * s / s2;
}

inline double log_sum_exp(const Eigen::VectorXd& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;  // all -inf, or a stray +inf/nan
  return mx + std::log((v.array() - mx).exp().sum());
}

// ESS of log-scale weights, overflow-safe; 0 when every weight is zero.
inline double log_weight_ess(const Eigen::VectorXd& logw) {
  if (logw.size() == 0) return 0.0;
  const double mx = logw.maxCoeff();
  if (!std::isfinite(mx)) return 0.0;
  const Eigen::ArrayXd w = (logw.array() - mx).exp();
  const double s = w.sum();
  return s * s / (w * w).sum();
}

// Systematic resampling: n draws from the categorical given by w (need not be
// normalized). Returns indices, deterministic given the engine state.
inline std::vector<int> systematic_resample(const Eigen::VectorXd& w, int n, std::mt19937_64& rng) {
  const double total = w.sum();
  if (!(total > 0.0)) throw ZeroMass("systematic_resample: weights sum to zero");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double step = total / n;
  double u = unif(rng) * step;
  std::vector<int> idx(n);
  double cum = w(0);
  int j = 0;
  for (int i = 0; i < n; ++i) {
    while (u > cum && j + 1 < w.size()) cum += w(++j);
    idx[i] = j;
    u += step;
  }
  return idx;
}

}  // namespace pfloc
