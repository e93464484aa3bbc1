#pragma once

#include <span>
#include <vector>

#include "vigraph/geometry.hpp"
#include "vigraph/types.hpp"

namespace vigraph {

/// Navigation state at a frame timestamp. The perturbation vector is
/// [dr, dalpha, dv, dbg, dba] (15).
struct NavState {
  Vec3 r = Vec3::Zero();
  Quat q = Quat::Identity();
  Vec3 v = Vec3::Zero();
  Vec3 bg = Vec3::Zero();
  Vec3 ba = Vec3::Zero();

  Pose pose() const { return Pose(r, q); }
  void set_pose(const Pose& T) {
    r = T.r;
    q = T.q;
  }
  NavState box_plus(const Vec15& delta) const;
};

/// a [-] b, the same convention as NavState::box_plus.
Vec15 nav_box_minus(const NavState& a, const NavState& b);

struct ImuSample {
  double t = 0.0;
  Vec3 gyro = Vec3::Zero();   // [rad/s]
  Vec3 accel = Vec3::Zero();  // [m/s^2]
};

struct ImuParams {
  double sigma_g = 1.7e-4;   // gyro noise density [rad/s/sqrt(Hz)]
  double sigma_a = 2.0e-3;   // accel noise density [m/s^2/sqrt(Hz)]
  double sigma_bg = 2.0e-5;  // gyro bias random walk [rad/s^2/sqrt(Hz)]
  double sigma_ba = 3.0e-3;  // accel bias random walk [m/s^3/sqrt(Hz)]
  double g = 9.81;
  double rate = 200.0;

  /// World z points up; gravity acts along -z.
  Vec3 gravity() const { return Vec3(0.0, 0.0, -g); }
  void validate() const;
};

/// Samples covering exactly [t0, t1]: interior samples plus linearly
/// interpolated samples at both ends. Throws if the buffer does not cover
/// the interval.
std::vector<ImuSample> slice_imu(std::span<const ImuSample> buffer, double t0,
                                 double t1);

/// Largest time gap between consecutive samples.
double max_imu_gap(std::span<const ImuSample> samples);

/// Relative-motion pseudo-measurement between two frames.
///
/// Deltas are expressed in the IMU frame of the first frame, integrated with
/// the midpoint rule at a fixed bias linearization point. The propagated
/// covariance is ordered [dp, dphi, dv, dbg, dba] and rotates into world
/// coordinates with the orientation of the first state.
class PreintegratedImu {
 public:
  FrameId frame_k = 0;
  FrameId frame_n = 0;

  PreintegratedImu() = default;

  /// Throws std::invalid_argument on an empty list or non-increasing times.
  static PreintegratedImu integrate(std::span<const ImuSample> samples,
                                    const ImuParams& params, const Vec3& bg_lin,
                                    const Vec3& ba_lin);

  /// Continues integration; a leading sample at the current end time is
  /// treated as the shared boundary and skipped.
  void append(std::span<const ImuSample> samples, const ImuParams& params);

  /// Re-integrates the stored samples at a new bias linearization point.
  PreintegratedImu relinearized(const ImuParams& params, const Vec3& bg_lin,
                                const Vec3& ba_lin) const;

  double t0() const { return t0_; }
  double t1() const { return t1_; }
  double dt() const { return t1_ - t0_; }

  const Quat& delta_q() const { return delta_q_; }
  const Vec3& delta_v() const { return delta_v_; }
  const Vec3& delta_p() const { return delta_p_; }
  const Vec3& bg_lin() const { return bg_lin_; }
  const Vec3& ba_lin() const { return ba_lin_; }

  /// d[dp, dphi, dv] / d[bg, ba], 9x6.
  const Eigen::Matrix<double, 9, 6>& bias_jacobian() const { return bias_jac_; }

  /// First-order bias-corrected deltas.
  Quat corrected_delta_q(const Vec3& bg) const;
  Vec3 corrected_delta_v(const Vec3& bg, const Vec3& ba) const;
  Vec3 corrected_delta_p(const Vec3& bg, const Vec3& ba) const;

  const Mat15& covariance() const { return covariance_; }
  /// Information in the first frame's IMU coordinates.
  const Mat15& information() const { return information_; }
  /// S with information() == S^T S.
  const Mat15& sqrt_information() const { return sqrt_information_; }

  const std::vector<ImuSample>& samples() const { return samples_; }

 private:
  void step(const ImuSample& s0, const ImuSample& s1, const ImuParams& params);
  void finalize();

  double t0_ = 0.0;
  double t1_ = 0.0;
  Quat delta_q_ = Quat::Identity();
  Vec3 delta_v_ = Vec3::Zero();
  Vec3 delta_p_ = Vec3::Zero();
  Vec3 bg_lin_ = Vec3::Zero();
  Vec3 ba_lin_ = Vec3::Zero();
  Eigen::Matrix<double, 9, 6> bias_jac_ = Eigen::Matrix<double, 9, 6>::Zero();
  Mat15 covariance_ = Mat15::Zero();
  Mat15 information_ = Mat15::Zero();
  Mat15 sqrt_information_ = Mat15::Zero();
  std::vector<ImuSample> samples_;
};

/// Prediction of the state at the second frame.
NavState predict(const NavState& x_k, const PreintegratedImu& pre,
                 const ImuParams& params);

struct ImuErrorResult {
  Vec15 error;  // predicted [-] x_n
  Mat15 J_k;
  Mat15 J_n;
  Mat15 W;  // information in world coordinates
};

ImuErrorResult imu_error(const NavState& x_k, const NavState& x_n,
                         const PreintegratedImu& pre, const ImuParams& params);

/// Whitened residual S * T(q_k)^T * e with exact Jacobians, where T rotates
/// the position, orientation and velocity blocks into world coordinates.
/// Its squared norm equals e^T W e.
struct ImuWhitened {
  Vec15 residual;
  Mat15 J_k;
  Mat15 J_n;
};

ImuWhitened imu_whitened(const NavState& x_k, const NavState& x_n,
                         const PreintegratedImu& pre, const ImuParams& params);

}  // namespace vigraph
