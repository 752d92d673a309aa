#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfloc/config.hpp"
#include "pfloc/sim.hpp"

namespace pfloc {

inline constexpr const char* kRunCsvHeader =
    "run_id,seed,ospa,cardinality_true,cardinality_est,wall_seconds";

namespace detail {

inline std::string fixed6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << content;
}

}  // namespace detail

// One row per run, in run order; failed runs carry ospa = nan.
inline std::string format_run_csv(const std::vector<RunResult>& runs) {
  std::ostringstream out;
  out << kRunCsvHeader << "\n";
  for (const auto& r : runs) {
    out << r.run_id << "," << r.seed << ","
        << detail::fixed6(r.failed ? std::numeric_limits<double>::quiet_NaN() : r.ospa)
        << "," << r.cardinality_true << "," << r.cardinality_est << ","
        << detail::fixed6(r.wall_seconds) << "\n";
  }
  return out.str();
}

// Kernel and particle rows for one run, appended sensor by sensor; feeds
// external scatter plots of the evolving beliefs.
inline SensorObserver snapshot_observer(const std::string& dir, int run_id) {
  std::filesystem::create_directories(dir);
  auto out = std::make_shared<std::ofstream>(
      std::filesystem::path(dir) / ("run_" + std::to_string(run_id) + ".csv"),
      std::ios::binary);
  if (!*out) throw Error("cannot write snapshot file in " + dir);
  *out << "sensor,ps_id,existence,kind,index,weight,x,y,z,"
          "cov_xx,cov_xy,cov_xz,cov_yy,cov_yz,cov_zz\n";
  return [out](int sensor, const EstimatorState& state) {
    for (const auto& ps : state.sources) {
      const std::string prefix = std::to_string(sensor) + "," + std::to_string(ps.id) +
                                 "," + detail::fixed6(ps.existence) + ",";
      for (size_t k = 0; k < ps.belief.kernels.size(); ++k) {
        const auto& kern = ps.belief.kernels[k];
        *out << prefix << "kernel," << k << "," << detail::fixed6(kern.weight);
        for (int i = 0; i < 3; ++i) *out << "," << detail::fixed6(kern.mean(i));
        for (int i = 0; i < 3; ++i)
          for (int j = i; j < 3; ++j) *out << "," << detail::fixed6(kern.cov(i, j));
        *out << "\n";
      }
      for (size_t k = 0; k < ps.belief.particles.size(); ++k) {
        const auto& cloud = ps.belief.particles[k];
        for (int p = 0; p < cloud.size(); ++p) {
          *out << prefix << "particle," << k << "," << detail::fixed6(cloud.weights(p));
          for (int i = 0; i < 3; ++i) *out << "," << detail::fixed6(cloud.points(i, p));
          *out << ",0,0,0,0,0,0\n";
        }
      }
    }
  };
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const McOutput& mc) {
  nlohmann::json j;
  j["config_ini"] = cfg.to_ini();
  j["method"] = cfg.method.method == Method::Pm     ? "pm"
                : cfg.method.method == Method::Edh  ? "edh"
                : cfg.method.method == Method::Ledh ? "ledh"
                                                    : "gromov";
  j["n_runs"] = static_cast<int>(mc.runs.size());
  j["failures"] = mc.failures;

  const bool any_ok = mc.failures < static_cast<int>(mc.runs.size());
  j["mean_ospa"] = any_ok ? nlohmann::json(mc.mean_ospa) : nlohmann::json();
  j["median_ospa"] = any_ok ? nlohmann::json(mc.box.median) : nlohmann::json();
  j["ospa_box"] = {{"min", mc.box.min},
                   {"q1", mc.box.q1},
                   {"median", mc.box.median},
                   {"q3", mc.box.q3},
                   {"max", mc.box.max},
                   {"whisker_lo", mc.box.whisker_lo},
                   {"whisker_hi", mc.box.whisker_hi},
                   {"outliers", mc.box.outliers}};

  nlohmann::json failed = nlohmann::json::array();
  for (const auto& r : mc.runs)
    if (r.failed) failed.push_back({{"run_id", r.run_id}, {"message", r.message}});
  j["failed_runs"] = failed;

  // per-sensor means over the runs that produced a full diagnostics trail
  const size_t n_sensors = cfg.sim.pair_ids.size();
  nlohmann::json sensors = nlohmann::json::array();
  for (size_t s = 0; s < n_sensors; ++s) {
    int n = 0, conv = 0, failed_s = 0;
    double meas = 0, legacy = 0, born = 0, kept = 0, iters = 0, flowfail = 0;
    for (const auto& r : mc.runs) {
      if (r.diagnostics.size() != n_sensors) continue;
      const auto& d = r.diagnostics[s];
      ++n;
      meas += d.n_measurements;
      legacy += d.legacy_in;
      born += d.born;
      kept += d.kept;
      iters += d.bp_iterations;
      flowfail += d.flow_failures;
      conv += d.bp_converged ? 1 : 0;
      failed_s += d.failed ? 1 : 0;
    }
    nlohmann::json row;
    row["sensor"] = static_cast<int>(s) + 1;
    row["runs"] = n;
    if (n > 0) {
      row["mean_measurements"] = meas / n;
      row["mean_legacy_in"] = legacy / n;
      row["mean_born"] = born / n;
      row["mean_kept"] = kept / n;
      row["mean_bp_iterations"] = iters / n;
      row["bp_converged_rate"] = static_cast<double>(conv) / n;
      row["total_flow_failures"] = flowfail;
      row["failed_updates"] = failed_s;
    }
    sensors.push_back(row);
  }
  j["per_sensor"] = sensors;
  return j;
}

// Thread count for experiment execution; unset or empty means 1.
inline int env_threads() {
  const char* raw = std::getenv("PFLOC_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  const int v = static_cast<int>(detail::to_int("PFLOC_THREADS", raw));
  if (v < 1) throw ValidationError("PFLOC_THREADS: must be >= 1");
  return v;
}

// Full batch: Monte-Carlo runs, then the CSV / JSON (and optional snapshot)
// artifacts. Aggregation order is independent of the thread count.
inline McOutput run_experiment(const ExperimentConfig& cfg, int threads = 1) {
  cfg.validate();
  std::function<SensorObserver(int)> observer_factory;
  if (!cfg.snapshot_dir.empty()) {
    const std::string dir = cfg.snapshot_dir;
    observer_factory = [dir](int run_id) { return snapshot_observer(dir, run_id); };
  }
  const McOutput mc =
      monte_carlo(cfg.sim, cfg.pipeline, cfg.method, cfg.n_runs, cfg.base_seed, threads,
                  cfg.record_timing, observer_factory);
  detail::write_text_file(cfg.output_csv, format_run_csv(mc.runs));
  detail::write_text_file(cfg.output_json, summary_json(cfg, mc).dump(2) + "\n");
  return mc;
}

// Point-set reader for the ospa subcommand: rows of x,y,z; a non-numeric
// first line is treated as a header; an empty file is an empty set.
inline std::vector<Vec3> read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<Vec3> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    std::string a, b, c, extra;
    if (!(row >> a >> b >> c) || (row >> extra))
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected x,y,z");
    try {
      out.emplace_back(detail::to_double("x", a), detail::to_double("y", b),
                       detail::to_double("z", c));
    } catch (const ValidationError&) {
      if (lineno == 1) continue;  // header row
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected numbers");
    }
  }
  return out;
}

}  // namespace pfloc
