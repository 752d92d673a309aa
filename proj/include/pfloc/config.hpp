#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pfloc/errors.hpp"
#include "pfloc/pipeline.hpp"
#include "pfloc/sim.hpp"

namespace pfloc {

// Experiment description: scenario + model + method + run blocks, loaded from
// a sectioned key=value text file. The canonical echo (to_ini) reloads to the
// same config, which is how summaries stay self-describing.
struct ExperimentConfig {
  SimConfig sim;
  PipelineConfig pipeline;
  MethodConfig method;

  int n_runs = 1;
  std::uint64_t base_seed = 1;
  std::string output_csv = "runs.csv";
  std::string output_json = "summary.json";
  std::string snapshot_dir;  // empty = no snapshots
  bool record_timing = true;

  void validate() const {
    pipeline.validate();
    method.validate();
    if (sim.n_sources < 0)
      throw ValidationError("scenario.n_sources: must be >= 0");
    if (sim.pair_ids.empty()) throw ValidationError("scenario.pairs: must be non-empty");
    const int nr =
        sim.receiver_positions.empty() ? 6 : static_cast<int>(sim.receiver_positions.size());
    for (const auto& [a, b] : sim.pair_ids)
      if (a < 1 || b < 1 || a > nr || b > nr || a == b)
        throw ValidationError("scenario.pairs: ids must index distinct receivers in 1.." +
                              std::to_string(nr));
    if (!(sim.ospa_cutoff > 0.0)) throw ValidationError("run.ospa_cutoff: must be > 0");
    if (!(sim.ospa_order >= 1.0)) throw ValidationError("run.ospa_order: must be >= 1");
    if (n_runs < 1) throw ValidationError("run.n_runs: must be >= 1");
  }

  std::string to_ini() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto sp = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && sp(s.front())) s.erase(s.begin());
  while (!s.empty() && sp(s.back())) s.pop_back();
  return s;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// section -> key -> raw value; duplicates rejected at parse time
using IniTable = std::map<std::string, std::map<std::string, std::string>>;

inline IniTable parse_ini(const std::string& text) {
  IniTable table;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ParseError("line " + std::to_string(lineno) + ": unterminated section header");
      section = lower(trim(line.substr(1, line.size() - 2)));
      if (section.empty())
        throw ParseError("line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ParseError("line " + std::to_string(lineno) + ": key outside any section");
    const std::string key = lower(trim(line.substr(0, eq)));
    if (key.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty key");
    if (!table[section].emplace(key, trim(line.substr(eq + 1))).second)
      throw ParseError("line " + std::to_string(lineno) + ": duplicate key " + section +
                       "." + key);
  }
  return table;
}

inline double to_double(const std::string& field, const std::string& raw) {
  const char* b = raw.data();
  const char* e = b + raw.size();
  double v = 0.0;
  const auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw ValidationError(field + ": expected a number, got '" + raw + "'");
  return v;
}

inline std::int64_t to_int(const std::string& field, const std::string& raw) {
  const char* b = raw.data();
  const char* e = b + raw.size();
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw ValidationError(field + ": expected an integer, got '" + raw + "'");
  return v;
}

inline bool to_bool(const std::string& field, const std::string& raw) {
  const std::string s = lower(raw);
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  throw ValidationError(field + ": expected true/false, got '" + raw + "'");
}

// "1-2, 3-4 5-6" -> {(1,2),(3,4),(5,6)}
inline std::vector<std::pair<int, int>> to_pairs(const std::string& field,
                                                 const std::string& raw) {
  std::vector<std::pair<int, int>> out;
  std::string token;
  std::istringstream in(raw);
  std::string norm = raw;
  std::replace(norm.begin(), norm.end(), ',', ' ');
  std::istringstream tokens(norm);
  while (tokens >> token) {
    const auto dash = token.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 == token.size())
      throw ValidationError(field + ": expected tokens like 1-2, got '" + token + "'");
    out.emplace_back(
        static_cast<int>(to_int(field, token.substr(0, dash))),
        static_cast<int>(to_int(field, token.substr(dash + 1))));
  }
  if (out.empty()) throw ValidationError(field + ": must list at least one pair");
  return out;
}

// "x y z; x y z; ..." -> positions
inline std::vector<Vec3> to_positions(const std::string& field, const std::string& raw) {
  std::vector<Vec3> out;
  std::istringstream groups(raw);
  std::string group;
  while (std::getline(groups, group, ';')) {
    group = trim(group);
    if (group.empty()) continue;
    std::istringstream coords(group);
    std::string a, b, c, extra;
    if (!(coords >> a >> b >> c) || (coords >> extra))
      throw ValidationError(field + ": expected 'x y z' triples separated by ';'");
    out.emplace_back(to_double(field, a), to_double(field, b), to_double(field, c));
  }
  if (out.size() < 2) throw ValidationError(field + ": need at least two receivers");
  return out;
}

struct SectionReader {
  std::string name;
  const std::map<std::string, std::string>* entries;  // null when section absent

  bool has(const std::string& key) const {
    return entries && entries->count(key) > 0;
  }
  std::string raw(const std::string& key) const { return entries->at(key); }
  std::string field(const std::string& key) const { return name + "." + key; }

  double num(const std::string& key, double fallback) const {
    return has(key) ? to_double(field(key), raw(key)) : fallback;
  }
  std::int64_t integer(const std::string& key, std::int64_t fallback) const {
    return has(key) ? to_int(field(key), raw(key)) : fallback;
  }
  std::int64_t require_integer(const std::string& key, const std::string& why) const {
    if (!has(key)) throw ValidationError(field(key) + ": required " + why);
    return to_int(field(key), raw(key));
  }
  bool flag(const std::string& key, bool fallback) const {
    return has(key) ? to_bool(field(key), raw(key)) : fallback;
  }
  std::string text(const std::string& key, std::string fallback) const {
    return has(key) ? raw(key) : std::move(fallback);
  }
};

inline void reject_unknown(const IniTable& table,
                           const std::map<std::string, std::vector<std::string>>& schema) {
  for (const auto& [section, entries] : table) {
    const auto it = schema.find(section);
    if (it == schema.end()) throw ValidationError("unknown section: [" + section + "]");
    for (const auto& [key, value] : entries) {
      (void)value;
      if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
        throw ValidationError("unknown key: " + section + "." + key);
    }
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  using namespace detail;
  const IniTable table = parse_ini(text);
  static const std::map<std::string, std::vector<std::string>> schema = {
      {"scenario", {"roi_half_width", "n_sources", "pairs", "receivers"}},
      {"model", {"c", "sigma_z", "p_d", "mu_c", "mu_b", "p_th", "prune_threshold"}},
      {"method",
       {"name", "n_kernels", "legacy_particles", "birth_particles", "n_lambda",
        "schedule", "geometric_ratio", "bootstrap_samples"}},
      {"run",
       {"n_runs", "base_seed", "ospa_cutoff", "ospa_order", "output_csv", "output_json",
        "snapshot_dir", "record_timing"}}};
  reject_unknown(table, schema);

  const auto section = [&](const char* name) {
    const auto it = table.find(name);
    return SectionReader{name, it == table.end() ? nullptr : &it->second};
  };
  const SectionReader scenario = section("scenario");
  const SectionReader model = section("model");
  const SectionReader method = section("method");
  const SectionReader run = section("run");

  ExperimentConfig cfg;

  const double half = scenario.num("roi_half_width", 1000.0);
  if (!(half > 0.0)) throw ValidationError("scenario.roi_half_width: must be > 0");
  cfg.pipeline.roi.lo = Vec3::Constant(-half);
  cfg.pipeline.roi.hi = Vec3::Constant(half);
  cfg.sim.n_sources = static_cast<int>(scenario.integer("n_sources", 5));
  if (scenario.has("receivers"))
    cfg.sim.receiver_positions =
        to_positions(scenario.field("receivers"), scenario.raw("receivers"));
  if (scenario.has("pairs")) {
    cfg.sim.pair_ids = to_pairs(scenario.field("pairs"), scenario.raw("pairs"));
  } else if (!cfg.sim.receiver_positions.empty()) {
    throw ValidationError("scenario.pairs: required when receivers are explicit");
  }

  cfg.pipeline.medium.c = model.num("c", 1500.0);
  if (!(cfg.pipeline.medium.c > 0.0)) throw ValidationError("model.c: must be > 0");
  cfg.pipeline.medium.sigma_v = model.num("sigma_z", 0.001 / cfg.pipeline.medium.c);
  if (!(cfg.pipeline.medium.sigma_v > 0.0))
    throw ValidationError("model.sigma_z: must be > 0");
  cfg.pipeline.da.p_d = model.num("p_d", cfg.pipeline.da.p_d);
  if (!(cfg.pipeline.da.p_d > 0.0 && cfg.pipeline.da.p_d <= 1.0))
    throw ValidationError("model.p_d: must be in (0,1]");
  cfg.pipeline.da.mu_c = model.num("mu_c", cfg.pipeline.da.mu_c);
  if (!(cfg.pipeline.da.mu_c >= 0.0)) throw ValidationError("model.mu_c: must be >= 0");
  cfg.pipeline.da.mu_b = model.num("mu_b", cfg.pipeline.da.mu_b);
  if (!(cfg.pipeline.da.mu_b > 0.0)) throw ValidationError("model.mu_b: must be > 0");
  cfg.pipeline.p_th = model.num("p_th", cfg.pipeline.p_th);
  if (!(cfg.pipeline.p_th > 0.0 && cfg.pipeline.p_th < 1.0))
    throw ValidationError("model.p_th: must be in (0,1)");
  cfg.pipeline.prune_threshold =
      model.num("prune_threshold", cfg.pipeline.prune_threshold);
  if (cfg.pipeline.prune_threshold < 0.0 || cfg.pipeline.prune_threshold >= 1.0)
    throw ValidationError("model.prune_threshold: must be in [0,1)");

  if (!method.has("name")) throw ValidationError("method.name: required");
  const std::string mname = lower(method.raw("name"));
  if (mname == "pm") {
    cfg.method.method = Method::Pm;
  } else if (mname == "edh") {
    cfg.method.method = Method::Edh;
  } else if (mname == "ledh") {
    cfg.method.method = Method::Ledh;
  } else if (mname == "gromov") {
    cfg.method.method = Method::Gromov;
  } else {
    throw ValidationError("method.name: expected pm|edh|ledh|gromov, got '" +
                          method.raw("name") + "'");
  }
  if (cfg.method.method == Method::Pm) {
    cfg.method.bootstrap_samples = static_cast<int>(
        method.require_integer("bootstrap_samples", "for the pm method"));
    if (cfg.method.bootstrap_samples < 1)
      throw ValidationError("method.bootstrap_samples: must be >= 1");
  } else {
    const std::string why = "for flow methods";
    cfg.method.n_kernels = static_cast<int>(method.require_integer("n_kernels", why));
    cfg.method.legacy_particles =
        static_cast<int>(method.require_integer("legacy_particles", why));
    cfg.method.birth_particles =
        static_cast<int>(method.require_integer("birth_particles", why));
    cfg.method.n_lambda = static_cast<int>(method.require_integer("n_lambda", why));
    if (cfg.method.n_kernels < 1) throw ValidationError("method.n_kernels: must be >= 1");
    if (cfg.method.legacy_particles < 1)
      throw ValidationError("method.legacy_particles: must be >= 1");
    if (cfg.method.birth_particles < 1)
      throw ValidationError("method.birth_particles: must be >= 1");
    if (cfg.method.n_lambda < 1) throw ValidationError("method.n_lambda: must be >= 1");
    const std::string sched = lower(method.text("schedule", "geometric"));
    if (sched == "uniform") {
      cfg.method.schedule_kind = ScheduleKind::Uniform;
    } else if (sched == "geometric") {
      cfg.method.schedule_kind = ScheduleKind::Geometric;
    } else {
      throw ValidationError("method.schedule: expected uniform|geometric, got '" + sched +
                            "'");
    }
    cfg.method.geometric_ratio = method.num("geometric_ratio", cfg.method.geometric_ratio);
    if (cfg.method.schedule_kind == ScheduleKind::Geometric &&
        !(cfg.method.geometric_ratio > 1.0))
      throw ValidationError("method.geometric_ratio: must be > 1");
  }

  cfg.n_runs = static_cast<int>(run.integer("n_runs", 1));
  const std::int64_t seed = run.integer("base_seed", 1);
  if (seed < 0) throw ValidationError("run.base_seed: must be >= 0");
  cfg.base_seed = static_cast<std::uint64_t>(seed);
  cfg.sim.ospa_cutoff = run.num("ospa_cutoff", cfg.sim.ospa_cutoff);
  cfg.sim.ospa_order = run.num("ospa_order", cfg.sim.ospa_order);
  cfg.output_csv = run.text("output_csv", cfg.output_csv);
  cfg.output_json = run.text("output_json", cfg.output_json);
  cfg.snapshot_dir = run.text("snapshot_dir", "");
  cfg.record_timing = run.flag("record_timing", true);

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline std::string ExperimentConfig::to_ini() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "[scenario]\n";
  out << "roi_half_width = " << 0.5 * (pipeline.roi.hi.x() - pipeline.roi.lo.x()) << "\n";
  out << "n_sources = " << sim.n_sources << "\n";
  if (!sim.receiver_positions.empty()) {
    out << "receivers = ";
    for (size_t i = 0; i < sim.receiver_positions.size(); ++i) {
      const Vec3& p = sim.receiver_positions[i];
      out << (i ? "; " : "") << p.x() << " " << p.y() << " " << p.z();
    }
    out << "\n";
  }
  out << "pairs = ";
  for (size_t i = 0; i < sim.pair_ids.size(); ++i)
    out << (i ? ", " : "") << sim.pair_ids[i].first << "-" << sim.pair_ids[i].second;
  out << "\n\n[model]\n";
  out << "c = " << pipeline.medium.c << "\n";
  out << "sigma_z = " << pipeline.medium.sigma_v << "\n";
  out << "p_d = " << pipeline.da.p_d << "\n";
  out << "mu_c = " << pipeline.da.mu_c << "\n";
  out << "mu_b = " << pipeline.da.mu_b << "\n";
  out << "p_th = " << pipeline.p_th << "\n";
  out << "prune_threshold = " << pipeline.prune_threshold << "\n";
  out << "\n[method]\n";
  if (method.method == Method::Pm) {
    out << "name = pm\n";
    out << "bootstrap_samples = " << method.bootstrap_samples << "\n";
  } else {
    out << "name = "
        << (method.method == Method::Edh ? "edh"
            : method.method == Method::Ledh ? "ledh" : "gromov")
        << "\n";
    out << "n_kernels = " << method.n_kernels << "\n";
    out << "legacy_particles = " << method.legacy_particles << "\n";
    out << "birth_particles = " << method.birth_particles << "\n";
    out << "n_lambda = " << method.n_lambda << "\n";
    out << "schedule = "
        << (method.schedule_kind == ScheduleKind::Uniform ? "uniform" : "geometric")
        << "\n";
    if (method.schedule_kind == ScheduleKind::Geometric)
      out << "geometric_ratio = " << method.geometric_ratio << "\n";
  }
  out << "\n[run]\n";
  out << "n_runs = " << n_runs << "\n";
  out << "base_seed = " << base_seed << "\n";
  out << "ospa_cutoff = " << sim.ospa_cutoff << "\n";
  out << "ospa_order = " << sim.ospa_order << "\n";
  out << "output_csv = " << output_csv << "\n";
  out << "output_json = " << output_json << "\n";
  if (!snapshot_dir.empty()) out << "snapshot_dir = " << snapshot_dir << "\n";
  out << "record_timing = " << (record_timing ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace pfloc
