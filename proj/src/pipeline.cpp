#include "vigraph/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace vigraph {

using nlohmann::json;

EstimatorConfig config_for_dataset(const SimDataset& dataset, const json& overrides) {
  EstimatorConfig base;
  base.rig = dataset.spec.rig;
  base.imu = dataset.spec.imu;
  if (dataset.spec.noise.pixel_sigma > 0) base.frontend.pixel_sigma = dataset.spec.noise.pixel_sigma;
  if (overrides.is_null()) return base;
  return estimator_config_from_json(overrides, base);
}

Trajectory frame_ground_truth(const SimDataset& dataset) {
  Trajectory out;
  for (const auto& f : dataset.frames) out.push_back({f.t, dataset.gt_at(f.t).x.pose()});
  return out;
}

RunResult run_estimator(const SimDataset& dataset, const EstimatorConfig& config, Mode mode,
                        const std::function<void(const Estimator&)>& on_frame) {
  if (dataset.frames.empty()) throw DatasetError("dataset has no frames");
  Estimator est(config, mode);
  RunResult out;
  std::size_t next = 0;
  const auto& imu = dataset.imu;
  for (const auto& frame : dataset.frames) {
    const std::size_t begin = next;
    while (next < imu.size() && imu[next].t <= frame.t) ++next;
    if (next < imu.size() && (next == 0 || imu[next - 1].t < frame.t)) ++next;
    est.add_imu(std::span<const ImuSample>(imu.data() + begin, next - begin));
    est.process(frame);
    out.causal.push_back(est.causal_pose());
    out.windows.push_back(est.window_stats());
    if (on_frame) on_frame(est);
  }
  out.final = est.finish();
  out.events = est.events();
  out.timings = est.timings();
  return out;
}

namespace {

double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * sorted.size()));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

}  // namespace

json timings_json(const std::vector<FrameTimings>& timings) {
  const std::vector<std::pair<const char*, double FrameTimings::*>> stages{
      {"ingest", &FrameTimings::ingest},
      {"keyframe", &FrameTimings::keyframe},
      {"triangulate", &FrameTimings::triangulate},
      {"maintain_window", &FrameTimings::maintain_window},
      {"import", &FrameTimings::import},
      {"fixation", &FrameTimings::fixation},
      {"optimize", &FrameTimings::optimize},
      {"loop", &FrameTimings::loop},
      {"total", &FrameTimings::total}};
  json out;
  out["unit"] = "ms";
  out["frames"] = timings.size();
  json st = json::object();
  for (const auto& [name, member] : stages) {
    std::vector<double> v;
    for (const auto& t : timings) v.push_back(t.*member);
    double mean = 0.0;
    for (double x : v) mean += x;
    if (!v.empty()) mean /= static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    st[name] = {{"mean", mean},
                {"p50", percentile(v, 50)},
                {"p90", percentile(v, 90)},
                {"p99", percentile(v, 99)},
                {"max", v.empty() ? 0.0 : v.back()}};
  }
  out["stages"] = st;
  json per_frame = json::array();
  for (const auto& t : timings) per_frame.push_back(t.optimize);
  out["optimize_per_frame"] = per_frame;
  return out;
}

void write_run(const RunResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tum(result.causal, dir / "causal.txt");
  write_tum(result.final, dir / "final.txt");
  std::ofstream events(dir / "events.jsonl");
  for (const auto& e : result.events) events << e.dump() << '\n';
  std::ofstream(dir / "timings.json") << timings_json(result.timings).dump(2) << '\n';
  if (!events) throw std::runtime_error("cannot write " + (dir / "events.jsonl").string());
}

}  // namespace vigraph
