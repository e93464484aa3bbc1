#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "json.hpp"

#include "vigraph/estimator.hpp"
#include "vigraph/eval.hpp"
#include "vigraph/sim.hpp"

namespace vigraph {

struct RunResult {
  Trajectory causal;  // one pose per frame, as estimated when it arrived
  Trajectory final;
  std::vector<nlohmann::json> events;
  std::vector<FrameTimings> timings;
  std::vector<WindowStats> windows;  // after each frame
};

/// Estimator configuration with the dataset's rig, IMU noise and pixel noise
/// as defaults, overridden by the keys present in `overrides` (null for none).
EstimatorConfig config_for_dataset(const SimDataset& dataset, const nlohmann::json& overrides);

/// Ground-truth pose at every frame time.
Trajectory frame_ground_truth(const SimDataset& dataset);

/// Feeds every frame with the IMU samples up to it. Throws DatasetError and
/// DivergenceError from the estimator. on_frame sees the estimator after
/// every processed frame.
RunResult run_estimator(const SimDataset& dataset, const EstimatorConfig& config, Mode mode,
                        const std::function<void(const Estimator&)>& on_frame = {});

/// Per-stage count, mean, p50, p90, p99 and max in ms, plus the per-frame
/// optimize times.
nlohmann::json timings_json(const std::vector<FrameTimings>& timings);

/// causal.txt, final.txt, events.jsonl and timings.json.
void write_run(const RunResult& result, const std::filesystem::path& dir);

}  // namespace vigraph
