#include "vigraph/geometry.hpp"

#include <cmath>

namespace vigraph {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

Quat canonical(const Quat& q) {
  Quat out = q.normalized();
  if (out.w() < 0.0) {
    out.coeffs() = -out.coeffs();
  }
  return out;
}

Quat quat_exp(const Vec3& v) {
  const double theta = v.norm();
  Quat q;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    q.w() = 1.0 - t2 / 8.0;
    q.vec() = 0.5 * (1.0 - t2 / 24.0) * v;
  } else {
    const double half = 0.5 * theta;
    q.w() = std::cos(half);
    q.vec() = (std::sin(half) / theta) * v;
  }
  return canonical(q);
}

Vec3 quat_log(const Quat& q_in) {
  const Quat q = canonical(q_in);
  const double n = q.vec().norm();
  const double w = q.w();
  if (n < kSmallAngle) {
    // atan2(n, w) / n ~= (1 - n^2 / (3 w^2)) / w
    return (2.0 / w) * (1.0 - n * n / (3.0 * w * w)) * q.vec();
  }
  const double theta = 2.0 * std::atan2(n, w);
  return (theta / n) * q.vec();
}

Vec3 box_minus(const Quat& q, const Quat& q_prime) {
  return quat_log(q * q_prime.conjugate());
}

Quat box_plus(const Quat& q, const Vec3& dalpha) {
  return canonical(quat_exp(dalpha) * q);
}

Mat3 right_jacobian(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 K = skew(phi);
  double a;
  double b;
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
  } else {
    const double t2 = theta * theta;
    a = (1.0 - std::cos(theta)) / t2;
    b = (theta - std::sin(theta)) / (t2 * theta);
  }
  return Mat3::Identity() - a * K + b * K * K;
}

Mat3 right_jacobian_inv(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 K = skew(phi);
  double c;
  if (theta < 1e-4) {
    c = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    c = 1.0 / (theta * theta) -
        (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() + 0.5 * K + c * K * K;
}

Mat3 left_jacobian(const Vec3& phi) { return right_jacobian(-phi); }

Mat3 left_jacobian_inv(const Vec3& phi) { return right_jacobian_inv(-phi); }

Pose Pose::from_matrix(const Mat4& T) {
  return Pose(T.block<3, 1>(0, 3), Quat(Mat3(T.block<3, 3>(0, 0))));
}

Mat4 Pose::matrix() const {
  Mat4 T = Mat4::Identity();
  T.block<3, 3>(0, 0) = rotation();
  T.block<3, 1>(0, 3) = r;
  return T;
}

Pose Pose::inverse() const {
  const Quat qi = q.conjugate();
  return Pose(-(qi * r), qi);
}

Pose Pose::operator*(const Pose& other) const {
  return Pose(r + q * other.r, q * other.q);
}

Vec4 Pose::transform(const Vec4& p) const {
  Vec4 out;
  out.head<3>() = q * p.head<3>() + r * p.w();
  out.w() = p.w();
  return out;
}

Pose Pose::box_plus(const Vec6& delta) const {
  Pose out;
  out.r = r + delta.head<3>();
  out.q = vigraph::box_plus(q, delta.tail<3>());
  return out;
}

Vec6 pose_box_minus(const Pose& b, const Pose& a) {
  Vec6 d;
  d.head<3>() = b.r - a.r;
  d.tail<3>() = box_minus(b.q, a.q);
  return d;
}

double translation_distance(const Pose& a, const Pose& b) {
  return (a.inverse() * b).r.norm();
}

double rotation_angle(const Pose& a, const Pose& b) {
  return quat_log(a.q.conjugate() * b.q).norm();
}

double yaw_of(const Quat& q) {
  const Mat3 R = q.toRotationMatrix();
  return std::atan2(R(1, 0), R(0, 0));
}

Quat quat_from_euler_zyx(double yaw, double pitch, double roll) {
  const Quat qz(Eigen::AngleAxisd(yaw, Vec3::UnitZ()));
  const Quat qy(Eigen::AngleAxisd(pitch, Vec3::UnitY()));
  const Quat qx(Eigen::AngleAxisd(roll, Vec3::UnitX()));
  return canonical(qz * qy * qx);
}

}  // namespace vigraph
