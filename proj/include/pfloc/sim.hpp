#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pfloc/ospa.hpp"
#include "pfloc/pipeline.hpp"

namespace pfloc {

struct Scenario {
  Roi roi;
  std::vector<Vec3> sources;
  std::vector<Receiver> receivers;
  std::vector<SensorPair> pairs;
  Medium medium;
  std::uint64_t seed = 0;

  void validate() const {
    roi.validate();
    medium.validate();
    for (const auto& s : sources)
      if (!roi.contains(s)) throw ValidationError("scenario: source outside roi");
    if (pairs.empty()) throw ValidationError("scenario: no sensor pairs");
  }
};

// nine pairs covering all three axes, receivers ordered +x,-x,+y,-y,+z,-z
inline const std::vector<std::pair<int, int>>& default_pair_ids() {
  static const std::vector<std::pair<int, int>> ids = {
      {1, 2}, {3, 4}, {5, 6}, {1, 3}, {2, 4}, {3, 5}, {4, 6}, {1, 5}, {2, 6}};
  return ids;
}

inline Scenario generate_scenario(
    int n_sources, const Roi& roi, std::uint64_t seed, const Medium& medium = Medium{},
    const std::vector<std::pair<int, int>>& pair_ids = default_pair_ids(),
    const std::vector<Vec3>& receiver_positions = {}) {
  if (n_sources < 0) throw InvalidParam("generate_scenario: n_sources must be >= 0");
  roi.validate();
  Scenario sc;
  sc.roi = roi;
  sc.medium = medium;
  sc.seed = seed;

  if (receiver_positions.empty()) {
    const Vec3 c = 0.5 * (roi.lo + roi.hi);
    const Vec3 h = 0.5 * (roi.hi - roi.lo);
    sc.receivers = {
        {1, c + Vec3(h.x(), 0, 0)},  {2, c - Vec3(h.x(), 0, 0)},
        {3, c + Vec3(0, h.y(), 0)},  {4, c - Vec3(0, h.y(), 0)},
        {5, c + Vec3(0, 0, h.z())},  {6, c - Vec3(0, 0, h.z())}};
  } else {
    if (receiver_positions.size() < 2)
      throw InvalidParam("generate_scenario: need at least two receivers");
    int rid = 1;
    for (const auto& p : receiver_positions) sc.receivers.push_back({rid++, p});
  }
  const int nr = static_cast<int>(sc.receivers.size());

  int pid = 1;
  for (const auto& [a, b] : pair_ids) {
    if (a < 1 || b < 1 || a > nr || b > nr || a == b)
      throw InvalidParam("generate_scenario: pair ids must index distinct receivers");
    sc.pairs.push_back(SensorPair::make(pid++, sc.receivers[a - 1], sc.receivers[b - 1]));
  }

  auto rng = RngPath(seed).child(stream::kScenario).engine();
  for (int i = 0; i < n_sources; ++i) sc.sources.push_back(roi.sample(rng));
  sc.validate();
  return sc;
}

// detection thinning + gaussian noise clamped to the feasible interval,
// poisson clutter uniform on it, order shuffled
inline SensorScan simulate_scan(const Scenario& sc, const SensorPair& pair,
                                const DaConfig& cfg, std::mt19937_64& rng) {
  sc.validate();
  cfg.validate();
  SensorScan scan;
  scan.pair = pair;
  const double lim = pair.max_tdoa(sc.medium);
  std::normal_distribution<double> noise(0.0, sc.medium.sigma_v);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (const auto& p : sc.sources) {
    if (u01(rng) > cfg.p_d) continue;
    const double z = tdoa_predict(p, pair, sc.medium) + noise(rng);
    scan.measurements.push_back(std::clamp(z, -lim, lim));
  }
  std::poisson_distribution<int> nc(cfg.mu_c);
  std::uniform_real_distribution<double> uz(-lim, lim);
  const int n_clutter = cfg.mu_c > 0.0 ? nc(rng) : 0;
  for (int i = 0; i < n_clutter; ++i) scan.measurements.push_back(uz(rng));
  std::shuffle(scan.measurements.begin(), scan.measurements.end(), rng);
  return scan;
}

inline std::vector<SensorScan> simulate_all_scans(const Scenario& sc,
                                                  const DaConfig& cfg) {
  std::vector<SensorScan> scans;
  for (size_t s = 0; s < sc.pairs.size(); ++s) {
    auto rng = RngPath(sc.seed)
                   .child(stream::kMeasurements)
                   .child(static_cast<std::uint64_t>(s) + 1)
                   .engine();
    scans.push_back(simulate_scan(sc, sc.pairs[s], cfg, rng));
  }
  return scans;
}

struct RunResult {
  int run_id = 0;
  std::uint64_t seed = 0;
  double ospa = 0.0;
  int cardinality_true = 0;
  int cardinality_est = 0;
  double wall_seconds = 0.0;
  std::vector<SourceEstimate> estimates;
  std::vector<Vec3> truth;
  std::vector<SensorDiagnostics> diagnostics;
  bool failed = false;
  std::string message;
};

// box-plot statistics; quartiles by linear interpolation, whiskers at the
// most extreme samples within 1.5 IQR of the box
struct BoxStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  double whisker_lo = 0.0, whisker_hi = 0.0;
  std::vector<double> outliers;
};

inline double quantile_linear(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InvalidParam("quantile_linear: empty sample");
  const double pos = q * (static_cast<double>(sorted.size()) - 1.0);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return (1.0 - frac) * sorted[lo] + frac * sorted[hi];
}

inline BoxStats box_stats(std::vector<double> v) {
  if (v.empty()) throw InvalidParam("box_stats: empty sample");
  std::sort(v.begin(), v.end());
  BoxStats b;
  b.min = v.front();
  b.max = v.back();
  b.q1 = quantile_linear(v, 0.25);
  b.median = quantile_linear(v, 0.5);
  b.q3 = quantile_linear(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo_fence = b.q1 - 1.5 * iqr;
  const double hi_fence = b.q3 + 1.5 * iqr;
  b.whisker_lo = b.max;
  b.whisker_hi = b.min;
  for (double x : v) {
    if (x < lo_fence || x > hi_fence) {
      b.outliers.push_back(x);
    } else {
      b.whisker_lo = std::min(b.whisker_lo, x);
      b.whisker_hi = std::max(b.whisker_hi, x);
    }
  }
  return b;
}

struct SimConfig {
  int n_sources = 5;
  std::vector<std::pair<int, int>> pair_ids = default_pair_ids();
  std::vector<Vec3> receiver_positions;  // empty = box face centers
  double ospa_cutoff = 50.0;
  double ospa_order = 1.0;
};

inline RunResult run_once(const SimConfig& sim, const PipelineConfig& cfg,
                          const MethodConfig& method, int run_id, std::uint64_t seed,
                          bool record_timing = true,
                          const SensorObserver& observer = {}) {
  RunResult r;
  r.run_id = run_id;
  r.seed = seed;
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const Scenario sc = generate_scenario(sim.n_sources, cfg.roi, seed, cfg.medium,
                                          sim.pair_ids, sim.receiver_positions);
    const std::vector<SensorScan> scans = simulate_all_scans(sc, cfg.da);
    RunOutput out = run_all_sensors(scans, cfg, method, seed, observer);
    r.truth = sc.sources;
    r.estimates = out.estimates;
    r.diagnostics = std::move(out.diagnostics);
    std::vector<Vec3> est;
    for (const auto& e : r.estimates) est.push_back(e.position);
    r.ospa = ospa(est, r.truth, sim.ospa_cutoff, sim.ospa_order);
    r.cardinality_true = static_cast<int>(r.truth.size());
    r.cardinality_est = static_cast<int>(est.size());
    if (record_timing) {
      const auto t1 = std::chrono::steady_clock::now();
      r.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    }
  } catch (const std::exception& e) {
    r.failed = true;
    r.message = e.what();
  }
  return r;
}

struct McOutput {
  std::vector<RunResult> runs;
  double mean_ospa = 0.0;
  BoxStats box;
  int failures = 0;
};

// independent runs with derived seeds; aggregation is a deterministic
// reduction in run order regardless of thread count
inline McOutput monte_carlo(const SimConfig& sim, const PipelineConfig& cfg,
                            const MethodConfig& method, int n_runs,
                            std::uint64_t base_seed, int threads = 1,
                            bool record_timing = true,
                            const std::function<SensorObserver(int)>& observer_for_run = {}) {
  if (n_runs < 1) throw InvalidParam("monte_carlo: n_runs must be >= 1");
  if (threads < 1) throw InvalidParam("monte_carlo: threads must be >= 1");
  McOutput out;
  out.runs.resize(n_runs);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_runs) return;
      out.runs[i] = run_once(sim, cfg, method, i, base_seed + i, record_timing,
                             observer_for_run ? observer_for_run(i) : SensorObserver{});
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min(threads, n_runs); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<double> scores;
  for (const auto& r : out.runs) {
    if (r.failed) {
      ++out.failures;
    } else {
      scores.push_back(r.ospa);
    }
  }
  if (!scores.empty()) {
    double s = 0.0;
    for (double x : scores) s += x;
    out.mean_ospa = s / static_cast<double>(scores.size());
    out.box = box_stats(scores);
  }
  return out;
}

}  // namespace pfloc
