#include "vigraph/camera.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/LU>

namespace vigraph {

std::string to_string(DistortionType type) {
  switch (type) {
    case DistortionType::kNone:
      return "none";
    case DistortionType::kRadialTangential:
      return "radial-tangential";
    case DistortionType::kEquidistant:
      return "equidistant";
  }
  return "none";
}

DistortionType distortion_from_string(const std::string& name) {
  if (name == "none") return DistortionType::kNone;
  if (name == "radial-tangential" || name == "radtan") {
    return DistortionType::kRadialTangential;
  }
  if (name == "equidistant") return DistortionType::kEquidistant;
  throw std::invalid_argument("unknown distortion model: " + name);
}

Vec2 Distortion::apply(const Vec2& x, Mat2* jacobian) const {
  switch (type) {
    case DistortionType::kNone: {
      if (jacobian) jacobian->setIdentity();
      return x;
    }
    case DistortionType::kRadialTangential: {
      const double k1 = k[0], k2 = k[1], p1 = k[2], p2 = k[3];
      const double u = x.x(), v = x.y();
      const double r2 = u * u + v * v;
      const double radial = 1.0 + k1 * r2 + k2 * r2 * r2;
      const double dradial_dr2 = k1 + 2.0 * k2 * r2;
      Vec2 out;
      out.x() = u * radial + 2.0 * p1 * u * v + p2 * (r2 + 2.0 * u * u);
      out.y() = v * radial + p1 * (r2 + 2.0 * v * v) + 2.0 * p2 * u * v;
      if (jacobian) {
        Mat2& J = *jacobian;
        J(0, 0) = radial + 2.0 * u * u * dradial_dr2 + 2.0 * p1 * v + 6.0 * p2 * u;
        J(0, 1) = 2.0 * u * v * dradial_dr2 + 2.0 * p1 * u + 2.0 * p2 * v;
        J(1, 0) = 2.0 * u * v * dradial_dr2 + 2.0 * p1 * u + 2.0 * p2 * v;
        J(1, 1) = radial + 2.0 * v * v * dradial_dr2 + 6.0 * p1 * v + 2.0 * p2 * u;
      }
      return out;
    }
    case DistortionType::kEquidistant: {
      const double r = x.norm();
      if (r < 1e-8) {
        if (jacobian) jacobian->setIdentity();
        return x;
      }
      const double theta = std::atan(r);
      const double t2 = theta * theta;
      const double t4 = t2 * t2;
      const double t6 = t4 * t2;
      const double t8 = t4 * t4;
      const double theta_d =
          theta * (1.0 + k[0] * t2 + k[1] * t4 + k[2] * t6 + k[3] * t8);
      const double s = theta_d / r;
      if (jacobian) {
        const double dthetad_dtheta = 1.0 + 3.0 * k[0] * t2 + 5.0 * k[1] * t4 +
                                      7.0 * k[2] * t6 + 9.0 * k[3] * t8;
        const double dtheta_dr = 1.0 / (1.0 + r * r);
        const double ds_dr = (dthetad_dtheta * dtheta_dr * r - theta_d) / (r * r);
        *jacobian = s * Mat2::Identity() + (ds_dr / r) * x * x.transpose();
      }
      return s * x;
    }
  }
  return x;
}

Vec2 Distortion::remove(const Vec2& xd) const {
  if (type == DistortionType::kNone) return xd;
  Vec2 x = xd;
  for (int i = 0; i < 30; ++i) {
    Mat2 J;
    const Vec2 residual = apply(x, &J) - xd;
    if (residual.squaredNorm() < 1e-26) break;
    x -= J.lu().solve(residual);
  }
  return x;
}

std::optional<Projection> CameraModel::project(const Vec3& p_C) const {
  if (p_C.z() <= kMinDepth) return std::nullopt;
  const double inv_z = 1.0 / p_C.z();
  const Vec2 x(p_C.x() * inv_z, p_C.y() * inv_z);
  Mat2 J_dist;
  const Vec2 xd = distortion.apply(x, &J_dist);

  Projection out;
  out.uv = Vec2(fu * xd.x() + cu, fv * xd.y() + cv);

  Mat23 J_norm;
  J_norm << inv_z, 0.0, -p_C.x() * inv_z * inv_z,
            0.0, inv_z, -p_C.y() * inv_z * inv_z;
  Mat2 F = Mat2::Zero();
  F(0, 0) = fu;
  F(1, 1) = fv;
  out.jacobian = F * J_dist * J_norm;
  return out;
}

Vec3 CameraModel::backproject(const Vec2& uv) const {
  const Vec2 xd((uv.x() - cu) / fu, (uv.y() - cv) / fv);
  const Vec2 x = distortion.remove(xd);
  return Vec3(x.x(), x.y(), 1.0);
}

void CameraRig::validate() const {
  if (cameras.empty()) throw std::invalid_argument("camera rig has no cameras");
  if (cameras.size() != T_SC.size()) {
    throw std::invalid_argument("camera rig: extrinsics count != camera count");
  }
}

CameraRig CameraRig::stereo_default(double baseline) {
  // camera: z forward, x right, y down; body: x forward, y left, z up
  Mat3 R_SC;
  R_SC.col(0) = Vec3(0.0, -1.0, 0.0);
  R_SC.col(1) = Vec3(0.0, 0.0, -1.0);
  R_SC.col(2) = Vec3(1.0, 0.0, 0.0);
  const Quat q_SC(R_SC);

  CameraRig rig;
  rig.cameras = {CameraModel{}, CameraModel{}};
  rig.T_SC = {Pose(Vec3(0.0, 0.5 * baseline, 0.0), q_SC),
              Pose(Vec3(0.0, -0.5 * baseline, 0.0), q_SC)};
  return rig;
}

Vec3 point_in_camera(const CameraRig& rig, int cam, const Pose& T_WS,
                     const Vec3& l_W) {
  const Pose& T_SC = rig.T_SC[cam];
  const Vec3 p_S = T_WS.q.conjugate() * (l_W - T_WS.r);
  return T_SC.q.conjugate() * (p_S - T_SC.r);
}

std::optional<ReprojectionResult> reprojection_error(const CameraRig& rig,
                                                     int cam, const Pose& T_WS,
                                                     const Vec4& l_W,
                                                     const Vec2& z) {
  const Pose& T_SC = rig.T_SC[cam];
  const Mat3 R_WS_T = T_WS.rotation().transpose();
  const Mat3 R_SC_T = T_SC.rotation().transpose();
  const double w = l_W.w();

  const Vec3 d_W = l_W.head<3>() - T_WS.r * w;
  const Vec3 p_S = R_WS_T * d_W;
  const Vec3 p_C = R_SC_T * (p_S - T_SC.r * w);

  const auto proj = rig.cameras[cam].project(p_C);
  if (!proj) return std::nullopt;

  ReprojectionResult out;
  out.error = z - proj->uv;
  const Mat23 J_C = -proj->jacobian * R_SC_T;  // d e / d p_S
  out.J_pose.leftCols<3>() = J_C * (-w * R_WS_T);
  out.J_pose.rightCols<3>() = J_C * (R_WS_T * skew(d_W));
  out.J_landmark = J_C * R_WS_T;
  return out;
}

}  // namespace vigraph
