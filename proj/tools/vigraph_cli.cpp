// Experiment driver: simulate datasets, run the estimator, evaluate results.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "vigraph/eval.hpp"
#include "vigraph/pipeline.hpp"
#include "vigraph/sim.hpp"

namespace {

using nlohmann::json;
using namespace vigraph;

constexpr int kOk = 0;
constexpr int kBadConfig = 2;
constexpr int kDatasetError = 3;
constexpr int kDivergence = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

int simulate(const std::string& spec_file, std::uint64_t seed, const std::string& out) {
  SimSpec spec;
  try {
    spec = sim_spec_from_json(read_json_file(spec_file));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const SimDataset ds = generate(spec, seed);
  write_dataset(ds, out);
  std::printf("%zu frames, %zu IMU samples, %zu landmarks -> %s\n", ds.frames.size(), ds.imu.size(),
              ds.landmarks.size(), out.c_str());
  return kOk;
}

int run(const std::string& dataset_dir, const std::string& config_file, const std::string& mode_name,
        const std::string& out) {
  Mode mode;
  try {
    mode = mode_from_string(mode_name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const json overrides = config_file.empty() ? json::object() : read_json_file(config_file);
  const SimDataset ds = read_dataset(dataset_dir);
  EstimatorConfig config;
  try {
    config = config_for_dataset(ds, overrides);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const RunResult r = run_estimator(ds, config, mode);
  write_run(r, out);
  std::printf("%zu frames, %zu events -> %s\n", r.causal.size(), r.events.size(), out.c_str());
  return kOk;
}

std::vector<double> parse_buckets(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0' || !(v > 0)) throw ConfigError("bad RPE bucket '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("no RPE buckets given");
  return out;
}

int evaluate(const std::string& est_file, const std::string& gt_file, const std::string& mode,
             const std::string& buckets, std::string out) {
  if (mode != "causal" && mode != "final") throw ConfigError("mode must be causal or final");
  const std::vector<double> distances = parse_buckets(buckets);
  Trajectory est, gt;
  try {
    est = read_tum(est_file);
    gt = read_trajectory(gt_file);
  } catch (const std::runtime_error& e) {
    throw DatasetError(e.what());
  }
  EvalReport report;
  try {
    report.ate = compute_ate(est, gt, mode);
  } catch (const std::invalid_argument& e) {
    throw DatasetError(e.what());
  }
  try {
    report.rpe = compute_rpe(est, gt, distances);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "warning: no relative errors: %s\n", e.what());
  }
  if (out.empty()) out = std::filesystem::path(est_file).parent_path().string();
  if (out.empty()) out = ".";
  std::filesystem::create_directories(out);
  std::ofstream(std::filesystem::path(out) / "report.json") << to_json(report).dump(2) << '\n';
  std::ofstream(std::filesystem::path(out) / "rpe.csv") << rpe_csv(report.rpe);
  std::printf("ATE (%s) rmse %.6f m, median %.6f m, max %.6f m over %zu poses\n", mode.c_str(),
              report.ate.position.rmse, report.ate.position.median, report.ate.position.max,
              report.ate.position.count);
  for (const auto& b : report.rpe) {
    std::printf("RPE %6.1f m: trans rmse %.4f m, rot rmse %.4f deg (%zu pairs)\n", b.distance,
                b.translation.rmse, b.rotation.rmse, b.translation.count);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual-inertial factor-graph estimator: simulation, estimation, evaluation"};
  app.require_subcommand(1);

  std::string spec_file, sim_out;
  std::uint64_t seed = 0;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
  sim->add_option("--spec", spec_file, "Simulation spec (JSON)")->required();
  sim->add_option("--seed", seed, "Random seed")->required();
  sim->add_option("--out", sim_out, "Output directory")->required();

  std::string dataset_dir, config_file, run_mode, run_out;
  auto* run_cmd = app.add_subcommand("run", "Run the estimator on a dataset");
  run_cmd->add_option("--dataset", dataset_dir, "Dataset directory")->required();
  run_cmd->add_option("--config", config_file, "Estimator configuration (JSON)");
  run_cmd->add_option("--mode", run_mode, "vio or slam")->required();
  run_cmd->add_option("--out", run_out, "Output directory")->required();

  std::string est_file, gt_file, eval_mode, buckets = "10,40,90,160", eval_out;
  auto* eval = app.add_subcommand("evaluate", "Absolute and relative trajectory errors");
  eval->add_option("--est", est_file, "Estimated trajectory (TUM)")->required();
  eval->add_option("--gt", gt_file, "Ground truth (TUM or gt.csv)")->required();
  eval->add_option("--mode", eval_mode, "causal or final")->required();
  eval->add_option("--rpe-buckets", buckets, "Comma-separated distances [m]");
  eval->add_option("--out", eval_out, "Output directory (default: next to --est)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadConfig;
  }

  try {
    if (*sim) return simulate(spec_file, seed, sim_out);
    if (*run_cmd) return run(dataset_dir, config_file, run_mode, run_out);
    return evaluate(est_file, gt_file, eval_mode, buckets, eval_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kBadConfig;
  } catch (const DatasetError& e) {
    std::fprintf(stderr, "dataset error: %s\n", e.what());
    return kDatasetError;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
