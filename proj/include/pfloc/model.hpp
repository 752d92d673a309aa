#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "pfloc/gaussian.hpp"
#include "pfloc/geometry.hpp"

namespace pfloc {

// Scalar-measurement model over a generic state dimension. The production
// model is the TDOA pair below; tests plug in low-dimensional stand-ins with
// closed-form posteriors.
class MeasurementModel {
 public:
  virtual ~MeasurementModel() = default;
  virtual int state_dim() const = 0;
  virtual double predict(const Eigen::VectorXd& x) const = 0;
  virtual Eigen::RowVectorXd jacobian(const Eigen::VectorXd& x) const = 0;
  virtual double noise_var() const = 0;
  virtual double clutter_density(double z) const = 0;

  double log_likelihood(double z, const Eigen::VectorXd& x) const {
    return log_normal_pdf(z, predict(x), noise_var());
  }
  double likelihood(double z, const Eigen::VectorXd& x) const {
    return std::exp(log_likelihood(z, x));
  }
  // one column per point
  virtual Eigen::VectorXd predict_batch(const Eigen::MatrixXd& pts) const {
    Eigen::VectorXd out(pts.cols());
    for (int j = 0; j < pts.cols(); ++j) out(j) = predict(pts.col(j));
    return out;
  }
};

class TdoaSensorModel final : public MeasurementModel {
 public:
  TdoaSensorModel(const SensorPair& pair, const Medium& medium)
      : pair_(pair), medium_(medium) {
    medium.validate();
  }

  int state_dim() const override { return 3; }
  double predict(const Eigen::VectorXd& x) const override {
    return tdoa_predict(x.head<3>(), pair_, medium_);
  }
  Eigen::RowVectorXd jacobian(const Eigen::VectorXd& x) const override {
    return tdoa_jacobian(x.head<3>(), pair_, medium_);
  }
  double noise_var() const override { return medium_.sigma_v * medium_.sigma_v; }
  double clutter_density(double z) const override {
    return pfloc::clutter_density(z, pair_, medium_);
  }
  Eigen::VectorXd predict_batch(const Eigen::MatrixXd& pts) const override {
    return ((pts.colwise() - pair_.rx_a.position).colwise().norm() -
            (pts.colwise() - pair_.rx_b.position).colwise().norm())
               .transpose() /
           medium_.c;
  }

  const SensorPair& pair() const { return pair_; }
  const Medium& medium() const { return medium_; }

 private:
  SensorPair pair_;
  Medium medium_;
};

// Local linear-Gaussian view of one measurement against one Gaussian prior:
// z_eff = H x + v, v ~ N(0, R), prior x ~ N(mu0, P). The effective
// measurement folds the linearization offset in, z_eff = z - h(xbar) + H xbar.
struct LinearizedModel {
  Eigen::MatrixXd H;   // 1 x d for scalar sensors
  Eigen::MatrixXd R;   // m x m
  Eigen::VectorXd z;   // m
  Eigen::VectorXd mu0; // prior mean
  Eigen::MatrixXd P;   // prior covariance
};

inline LinearizedModel linearize(const MeasurementModel& model, double z,
                                 const Eigen::VectorXd& xbar, const Eigen::VectorXd& mu0,
                                 const Eigen::MatrixXd& P) {
  LinearizedModel lin;
  lin.H = model.jacobian(xbar);
  lin.R = Eigen::MatrixXd::Constant(1, 1, model.noise_var());
  lin.z = Eigen::VectorXd::Constant(1, z - model.predict(xbar) + lin.H.row(0).dot(xbar));
  lin.mu0 = mu0;
  lin.P = P;
  return lin;
}

// Statistical-linearization residual of the model around a linearization,
// taken over a Gaussian kernel with cubature points: bias and variance of
// h(x) - h_lin(x). Folding these into the effective measurement keeps
// conjugate updates and evidence honest when the kernel spans noticeable
// curvature -- a linear update otherwise collapses the measured direction
// to the noise floor no matter how wide the kernel is, and a few sensors
// of that walk the belief away from the source inside overconfident
// kernels. Identically zero for a linear model.
struct SlrResidual {
  double bias = 0.0;
  double var = 0.0;
};

inline SlrResidual slr_residual(const MeasurementModel& model, double z_raw,
                                const LinearizedModel& lin, const Eigen::VectorXd& mean,
                                const Eigen::MatrixXd& cov) {
  const int d = static_cast<int>(mean.size());
  const double c0 = z_raw - lin.z(0);  // h_lin(x) = H x + c0
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
  SlrResidual out;
  double sq = 0.0;
  for (int i = 0; i < d; ++i) {
    const Eigen::VectorXd axis =
        std::sqrt(std::max(es.eigenvalues()(i), 0.0) * d) * es.eigenvectors().col(i);
    for (const double sgn : {-1.0, 1.0}) {
      const Eigen::VectorXd x = mean + sgn * axis;
      const double diff = model.predict(x) - (lin.H.row(0).dot(x) + c0);
      out.bias += diff;
      sq += diff * diff;
    }
  }
  out.bias /= 2.0 * d;
  out.var = std::max(sq / (2.0 * d) - out.bias * out.bias, 0.0);
  return out;
}

}  // namespace pfloc
