// Batch driver: run experiments from a config file, validate configs, or
// score an estimate CSV against a truth CSV.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "pfloc.hpp"

namespace {

int cmd_validate(const std::string& path) {
  const pfloc::ExperimentConfig cfg = pfloc::load_config(path);
  std::printf("%s", cfg.to_ini().c_str());
  std::fprintf(stderr, "ok: %s\n", path.c_str());
  return 0;
}

int cmd_run(const std::string& path) {
  const pfloc::ExperimentConfig cfg = pfloc::load_config(path);
  const int threads = pfloc::env_threads();
  const pfloc::McOutput mc = pfloc::run_experiment(cfg, threads);
  std::fprintf(stderr, "wrote %s and %s (%d runs, %d failed, threads=%d)\n",
               cfg.output_csv.c_str(), cfg.output_json.c_str(),
               static_cast<int>(mc.runs.size()), mc.failures, threads);
  if (mc.failures < static_cast<int>(mc.runs.size()))
    std::printf("mean_ospa %.6f\nmedian_ospa %.6f\n", mc.mean_ospa, mc.box.median);
  return mc.failures == static_cast<int>(mc.runs.size()) ? 1 : 0;
}

int cmd_ospa(const std::string& est_path, const std::string& truth_path, double cutoff,
             double order) {
  const auto est = pfloc::read_points_csv(est_path);
  const auto truth = pfloc::read_points_csv(truth_path);
  std::printf("%.6f\n", pfloc::ospa(est, truth, cutoff, order));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TDOA multi-source localization experiments"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run the experiment described by a config file");
  run->add_option("config", config_path, "experiment config file")->required();

  std::string val_path;
  auto* validate = app.add_subcommand("validate", "load a config and echo its canonical form");
  validate->add_option("config", val_path, "experiment config file")->required();

  std::string est_path, truth_path;
  double cutoff = 50.0, order = 1.0;
  auto* ospa = app.add_subcommand("ospa", "OSPA distance between two x,y,z point CSVs");
  ospa->add_option("estimates", est_path, "estimated positions CSV")->required();
  ospa->add_option("truth", truth_path, "true positions CSV")->required();
  ospa->add_option("--cutoff", cutoff, "cardinality penalty distance");
  ospa->add_option("--order", order, "metric order p");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path);
    if (validate->parsed()) return cmd_validate(val_path);
    return cmd_ospa(est_path, truth_path, cutoff, order);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
