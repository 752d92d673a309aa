#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "pfloc/errors.hpp"
#include "pfloc/gaussian.hpp"

namespace pfloc {

using Vec3 = Eigen::Vector3d;

// Propagation medium: speed of sound and the TDOA noise std (both in SI, the
// noise is in seconds).
struct Medium {
  double c = 1500.0;
  double sigma_v = 0.001 / 1500.0;

  void validate() const {
    if (!(c > 0.0)) throw InvalidParam("Medium: c must be positive");
    if (!(sigma_v > 0.0)) throw InvalidParam("Medium: sigma_v must be positive");
  }
};

struct Receiver {
  int id = 0;
  Vec3 position = Vec3::Zero();
};

// Receiver pair acting as one TDOA sensor.
struct SensorPair {
  int id = 0;
  Receiver rx_a, rx_b;
  double baseline = 0.0;

  static SensorPair make(int id, const Receiver& a, const Receiver& b) {
    SensorPair p;
    p.id = id;
    p.rx_a = a;
    p.rx_b = b;
    p.baseline = (a.position - b.position).norm();
    if (!(p.baseline > 0.0))
      throw DegenerateGeometry("SensorPair: coincident receivers");
    return p;
  }

  double max_tdoa(const Medium& medium) const { return baseline / medium.c; }
};

// Axis-aligned region of interest.
struct Roi {
  Vec3 lo = Vec3::Constant(-1000.0);
  Vec3 hi = Vec3::Constant(1000.0);

  void validate() const {
    if (!((hi - lo).minCoeff() > 0.0)) throw InvalidParam("Roi: hi must exceed lo");
  }

  double volume() const { return (hi - lo).prod(); }

  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }

  Vec3 sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Vec3 p;
    for (int i = 0; i < 3; ++i) p(i) = lo(i) + (hi(i) - lo(i)) * unif(rng);
    return p;
  }
};

inline constexpr double kReceiverGuard = 1e-6;  // meters

inline double tdoa_predict(const Vec3& p, const SensorPair& pair, const Medium& medium) {
  const double ra = (p - pair.rx_a.position).norm();
  const double rb = (p - pair.rx_b.position).norm();
  return (ra - rb) / medium.c;
}

// Gradient of the predicted TDOA wrt source position; undefined on a receiver.
inline Eigen::RowVector3d tdoa_jacobian(const Vec3& p, const SensorPair& pair,
                                        const Medium& medium) {
  const Vec3 da = p - pair.rx_a.position;
  const Vec3 db = p - pair.rx_b.position;
  const double ra = da.norm();
  const double rb = db.norm();
  if (ra < kReceiverGuard || rb < kReceiverGuard)
    throw DegenerateGeometry("tdoa_jacobian: point on a receiver");
  return (da.transpose() / ra - db.transpose() / rb) / medium.c;
}

inline double tdoa_log_likelihood(double z, const Vec3& p, const SensorPair& pair,
                                  const Medium& medium) {
  return log_normal_pdf(z, tdoa_predict(p, pair, medium), medium.sigma_v * medium.sigma_v);
}

inline double tdoa_likelihood(double z, const Vec3& p, const SensorPair& pair,
                              const Medium& medium) {
  return std::exp(tdoa_log_likelihood(z, p, pair, medium));
}

// Clutter is uniform over the feasible TDOA interval [-d/c, +d/c].
inline double clutter_density(double z, const SensorPair& pair, const Medium& medium) {
  const double half = pair.max_tdoa(medium);
  return std::abs(z) <= half ? medium.c / (2.0 * pair.baseline) : 0.0;
}

// Keeps a point off the receivers so the jacobian stays defined; used when
// constructing kernel means from data.
inline Vec3 clamp_off_receivers(Vec3 p, const SensorPair& pair, double min_dist = 1e-3) {
  for (const Receiver* r : {&pair.rx_a, &pair.rx_b}) {
    const Vec3 d = p - r->position;
    const double n = d.norm();
    if (n < min_dist) {
      Vec3 dir = n > 0.0 ? Vec3(d / n) : Vec3::UnitX();
      p = r->position + min_dist * dir;
    }
  }
  return p;
}

}  // namespace pfloc
