#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "vigraph/geometry.hpp"

namespace vigraph {

struct StampedPose {
  double t = 0.0;
  Pose T;
};
using Trajectory = std::vector<StampedPose>;

/// TUM format, one "t x y z qx qy qz qw" row per line. Throws
/// std::runtime_error on malformed rows or non-increasing timestamps.
Trajectory read_tum(const std::filesystem::path& file);
void write_tum(const Trajectory& traj, const std::filesystem::path& file);
std::string tum_line(const StampedPose& p);

/// Accepts either a TUM file or a simulator gt.csv.
Trajectory read_trajectory(const std::filesystem::path& file);

/// Nearest-neighbour association, (estimate index, ground-truth index).
std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est,
                                                           const Trajectory& gt,
                                                           double max_dt = 0.01);

struct YawAlignment {
  double yaw = 0.0;
  Vec3 translation = Vec3::Zero();

  Pose as_pose() const;
};

/// Rotation about gravity plus translation minimizing the summed squared
/// position differences gt - (R est + t). Throws with fewer than 2 pairs.
YawAlignment align_yaw_position(const std::vector<Vec3>& est, const std::vector<Vec3>& gt);

struct Stats {
  std::size_t count = 0;
  double rmse = 0.0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
};
Stats compute_stats(std::vector<double> values);

struct AteReport {
  std::string mode = "causal";
  Stats position;
  YawAlignment alignment;
};

/// Associates, aligns and reports position statistics.
AteReport compute_ate(const Trajectory& est, const Trajectory& gt, const std::string& mode,
                      double max_dt = 0.01);

struct RpeBucket {
  double distance = 0.0;  // [m] travelled along ground truth
  Stats translation;      // [m]
  Stats rotation;         // [deg]
};

/// Relative errors between associated poses a given ground-truth path
/// length apart. Throws if the trajectory is shorter than the smallest bucket.
std::vector<RpeBucket> compute_rpe(const Trajectory& est, const Trajectory& gt,
                                   const std::vector<double>& distances, double max_dt = 0.01);

struct EvalReport {
  AteReport ate;
  std::vector<RpeBucket> rpe;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);
std::string rpe_csv(const std::vector<RpeBucket>& buckets);

}  // namespace vigraph
