#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vigraph/geometry.hpp"
#include "vigraph/types.hpp"

namespace vigraph {

/// Points closer than this along the optical axis do not project.
inline constexpr double kMinDepth = 1e-2;

enum class DistortionType { kNone, kRadialTangential, kEquidistant };

std::string to_string(DistortionType type);
DistortionType distortion_from_string(const std::string& name);

struct Distortion {
  DistortionType type = DistortionType::kNone;
  // radial-tangential: k1, k2, p1, p2; equidistant: k1..k4
  std::array<double, 4> k{0.0, 0.0, 0.0, 0.0};

  /// Normalized undistorted -> normalized distorted, with 2x2 Jacobian.
  Vec2 apply(const Vec2& x, Mat2* jacobian = nullptr) const;
  /// Inverse of apply by Gauss-Newton.
  Vec2 remove(const Vec2& xd) const;
};

struct Projection {
  Vec2 uv;
  Mat23 jacobian;  // d uv / d p_C
};

struct CameraModel {
  double fu = 400.0;
  double fv = 400.0;
  double cu = 320.0;
  double cv = 240.0;
  int width = 640;
  int height = 480;
  Distortion distortion;

  /// Empty when the point is behind the camera (z <= kMinDepth).
  std::optional<Projection> project(const Vec3& p_C) const;

  /// Ray with z = 1 through pixel uv.
  Vec3 backproject(const Vec2& uv) const;

  bool inside(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.y() >= 0.0 && uv.x() < width && uv.y() < height;
  }
};

/// Cameras rigidly attached to the IMU frame S. Extrinsics are T_SC_i.
struct CameraRig {
  std::vector<CameraModel> cameras;
  std::vector<Pose> T_SC;

  int size() const { return static_cast<int>(cameras.size()); }
  /// Throws std::invalid_argument when empty or mismatched.
  void validate() const;

  /// Forward-looking stereo pair: x forward, y left, z up in S.
  static CameraRig stereo_default(double baseline = 0.11);
};

struct ReprojectionFactor {
  FrameId frame = 0;
  LandmarkId landmark = 0;
  int cam = 0;
  Vec2 measurement = Vec2::Zero();
  Mat2 information = Mat2::Identity();
};

struct ReprojectionResult {
  Vec2 error;
  Mat26 J_pose;      // w.r.t. [dr, dalpha] of T_WS
  Mat23 J_landmark;  // w.r.t. Euclidean part of l_W
};

/// e = z - h(T_SC^-1 T_WS^-1 l_W). Empty when the point falls behind the
/// camera; callers drop such terms from the cost.
std::optional<ReprojectionResult> reprojection_error(const CameraRig& rig,
                                                     int cam, const Pose& T_WS,
                                                     const Vec4& l_W,
                                                     const Vec2& z);

/// Point in camera coordinates, no projection.
Vec3 point_in_camera(const CameraRig& rig, int cam, const Pose& T_WS,
                     const Vec3& l_W);

}  // namespace vigraph
