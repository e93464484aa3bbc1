#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "vigraph/camera.hpp"
#include "vigraph/imu.hpp"
#include "vigraph/types.hpp"

namespace vigraph {

enum class TrajectoryKind { kRest, kCircle, kLissajous, kWaypointSpline };

std::string to_string(TrajectoryKind kind);
TrajectoryKind trajectory_from_string(const std::string& name);

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::kCircle;
  double duration = 30.0;     // [s]
  double frame_rate = 10.0;   // [Hz]
  double imu_rate = 200.0;    // [Hz]
  double preamble = 1.0;      // stationary time before moving [s]
  double ramp = 2.0;          // speed ramp duration [s]
  double period = 10.0;       // one lap / one cycle of the path [s]

  double radius = 4.0;            // circle
  double height_amplitude = 0.3;  // circle: vertical wave, two per lap
  Vec3 lissajous_amplitude = Vec3(3.0, 2.0, 0.5);
  std::vector<Vec3> waypoints;    // closed spline through these

  double yaw_dither = 0.15;       // [rad]
  double pitch_dither = 0.0;      // [rad]
  double roll_dither = 0.0;       // [rad]
  double dither_frequency = 0.35; // [Hz]

  void validate() const;
};

struct LandmarkFieldSpec {
  int count = 500;
  Vec3 center = Vec3::Zero();
  double inner_radius = 6.0;
  double outer_radius = 10.0;
  double z_min = -2.0;
  double z_max = 3.0;
  int min_observations = 30;
};

struct NoiseSpec {
  double pixel_sigma = 1.0;
  double outlier_fraction = 0.02;
  bool imu_noise = true;
  bool bias_walk = true;
  Vec3 gyro_bias = Vec3(2e-3, -1e-3, 1.5e-3);
  Vec3 accel_bias = Vec3(2e-2, -3e-2, 1e-2);

  static NoiseSpec none();
};

struct SimSpec {
  TrajectorySpec trajectory;
  LandmarkFieldSpec landmarks;
  NoiseSpec noise;
  ImuParams imu;
  CameraRig rig = CameraRig::stereo_default();

  void validate() const;
};

struct GtState {
  double t = 0.0;
  NavState x;
};

struct SimObservation {
  LandmarkId landmark = 0;
  int cam = 0;
  Vec2 uv = Vec2::Zero();
  bool outlier = false;
};

struct SimFrame {
  FrameId id = 0;
  double t = 0.0;
  std::vector<SimObservation> observations;
};

struct SimDataset {
  SimSpec spec;
  std::uint64_t seed = 0;
  std::vector<GtState> gt;  // one per IMU sample
  std::vector<ImuSample> imu;
  std::vector<SimFrame> frames;
  std::map<LandmarkId, Vec3> landmarks;

  /// Ground truth at a sample time (exact match or nearest sample).
  const GtState& gt_at(double t) const;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pose, velocity, acceleration and body rate of the smooth trajectory.
struct Kinematics {
  Vec3 p, v, a;
  Quat q;
  Vec3 omega_B;
};
Kinematics trajectory_at(const TrajectorySpec& spec, double t);

/// Throws std::invalid_argument for an invalid spec and DatasetError when a
/// frame sees fewer landmarks than required.
SimDataset generate(const SimSpec& spec, std::uint64_t seed);

/// Dead-reckons the IMU stream from the first ground-truth state (trapezoidal
/// rule) and returns the largest position deviation from ground truth.
double integrate_check(const SimDataset& dataset);

void write_dataset(const SimDataset& dataset, const std::filesystem::path& dir);
/// Throws DatasetError on missing or malformed files.
SimDataset read_dataset(const std::filesystem::path& dir);

nlohmann::json to_json(const SimSpec& spec);
/// Missing keys keep their defaults; throws std::invalid_argument on bad values.
SimSpec sim_spec_from_json(const nlohmann::json& j);

nlohmann::json rig_to_json(const CameraRig& rig);
CameraRig rig_from_json(const nlohmann::json& j);
nlohmann::json imu_to_json(const ImuParams& p);
ImuParams imu_from_json(const nlohmann::json& j, ImuParams base = {});

}  // namespace vigraph
