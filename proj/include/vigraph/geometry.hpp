#pragma once

// Quaternion / SE(3) primitives shared by every error term.
//
// Conventions:
//  - Hamiltonian quaternions, canonicalized to w >= 0.
//  - Orientation perturbation is multiplicative on the left (world frame):
//      q = Exp(dalpha) * q_bar
//  - A pose perturbation is ordered [dr, dalpha] with r = r_bar + dr.

#include "vigraph/types.hpp"

namespace vigraph {

/// Below this angle exp/log switch to their Taylor expansions.
inline constexpr double kSmallAngle = 1e-8;

Mat3 skew(const Vec3& v);

/// Flips the sign so that w >= 0 and renormalizes.
Quat canonical(const Quat& q);

Quat quat_exp(const Vec3& v);

/// Returns a rotation vector with norm <= pi.
Vec3 quat_log(const Quat& q);

/// q [-] q' = Log(q * q'^-1)
Vec3 box_minus(const Quat& q, const Quat& q_prime);

/// Exp(dalpha) * q, canonicalized.
Quat box_plus(const Quat& q, const Vec3& dalpha);

// SO(3) Jacobians: Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)
Mat3 right_jacobian(const Vec3& phi);
Mat3 right_jacobian_inv(const Vec3& phi);
Mat3 left_jacobian(const Vec3& phi);
Mat3 left_jacobian_inv(const Vec3& phi);

/// Rigid transform T_AB: maps coordinates in B to coordinates in A.
struct Pose {
  Vec3 r = Vec3::Zero();
  Quat q = Quat::Identity();

  Pose() = default;
  Pose(const Vec3& r_in, const Quat& q_in) : r(r_in), q(canonical(q_in)) {}

  static Pose identity() { return {}; }
  static Pose from_matrix(const Mat4& T);

  Mat3 rotation() const { return q.toRotationMatrix(); }
  Mat4 matrix() const;
  Pose inverse() const;
  Pose operator*(const Pose& other) const;

  Vec3 transform(const Vec3& p) const { return q * p + r; }
  /// Homogeneous version: P_A = T_AB P_B.
  Vec4 transform(const Vec4& p) const;

  /// Left perturbation [dr, dalpha].
  Pose box_plus(const Vec6& delta) const;
};

/// Error between two poses in the same convention as box_plus:
/// a.box_plus(pose_box_minus(b, a)) == b.
Vec6 pose_box_minus(const Pose& b, const Pose& a);

/// Translation norm and rotation angle of a^-1 * b.
double translation_distance(const Pose& a, const Pose& b);
double rotation_angle(const Pose& a, const Pose& b);

/// Yaw of a rotation about the world z axis (ZYX convention).
double yaw_of(const Quat& q);

Quat quat_from_euler_zyx(double yaw, double pitch, double roll);

}  // namespace vigraph
