#include "doctest.h"
#include "test_util.hpp"
#include "vigraph/camera.hpp"

using namespace vigraph;
using testutil::Rng;

namespace {

CameraModel model_with(DistortionType type) {
  CameraModel cam;
  cam.distortion.type = type;
  if (type == DistortionType::kRadialTangential) {
    cam.distortion.k = {-0.28, 0.07, 2e-4, -1.5e-4};
  } else if (type == DistortionType::kEquidistant) {
    cam.distortion.k = {0.01, -0.005, 0.002, -0.0005};
  }
  return cam;
}

CameraRig rig_with(DistortionType type) {
  CameraRig rig = CameraRig::stereo_default();
  for (auto& c : rig.cameras) c = model_with(type);
  return rig;
}

// landmark somewhere in front of camera `cam` of a random body pose
Vec3 visible_point(Rng& rng, const CameraRig& rig, int cam, const Pose& T_WS) {
  const Vec3 p_C(rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4), 1.0);
  const Vec3 p_S = rig.T_SC[cam].transform(Vec3(p_C * rng.uniform(1.0, 12.0)));
  return T_WS.transform(p_S);
}

}  // namespace

TEST_CASE("project basics") {
  CameraModel cam;
  const auto p = cam.project(Vec3(0, 0, 1));
  REQUIRE(p);
  CHECK((p->uv - Vec2(320, 240)).norm() == 0.0);
  CHECK_FALSE(cam.project(Vec3(0, 0, -1)));
  CHECK_FALSE(cam.project(Vec3(0, 0, kMinDepth)));
}

TEST_CASE("radial-tangential distortion matches scalar formula") {
  Rng rng(20);
  const CameraModel cam = model_with(DistortionType::kRadialTangential);
  const auto& k = cam.distortion.k;
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5));
    const double x = p.x() / p.z(), y = p.y() / p.z();
    const double r2 = x * x + y * y;
    const double rad = 1 + k[0] * r2 + k[1] * r2 * r2;
    const double xd = x * rad + 2 * k[2] * x * y + k[3] * (r2 + 2 * x * x);
    const double yd = y * rad + k[2] * (r2 + 2 * y * y) + 2 * k[3] * x * y;
    const auto pr = cam.project(p);
    REQUIRE(pr);
    CHECK(std::abs(pr->uv.x() - (cam.fu * xd + cam.cu)) < 1e-9);
    CHECK(std::abs(pr->uv.y() - (cam.fv * yd + cam.cv)) < 1e-9);
  }
}

TEST_CASE("equidistant distortion matches scalar formula") {
  Rng rng(21);
  const CameraModel cam = model_with(DistortionType::kEquidistant);
  const auto& k = cam.distortion.k;
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5));
    const double x = p.x() / p.z(), y = p.y() / p.z();
    const double r = std::hypot(x, y);
    const double th = std::atan(r);
    const double thd = th * (1 + k[0] * std::pow(th, 2) + k[1] * std::pow(th, 4) +
                             k[2] * std::pow(th, 6) + k[3] * std::pow(th, 8));
    const auto pr = cam.project(p);
    REQUIRE(pr);
    CHECK(std::abs(pr->uv.x() - (cam.fu * thd / r * x + cam.cu)) < 1e-9);
    CHECK(std::abs(pr->uv.y() - (cam.fv * thd / r * y + cam.cv)) < 1e-9);
  }
}

TEST_CASE("backproject then project returns the pixel") {
  Rng rng(22);
  for (auto type : {DistortionType::kNone, DistortionType::kRadialTangential,
                    DistortionType::kEquidistant}) {
    const CameraModel cam = model_with(type);
    for (int i = 0; i < 100; ++i) {
      const Vec2 uv(rng.uniform(20, 620), rng.uniform(20, 460));
      const Vec3 ray = cam.backproject(uv);
      const auto pr = cam.project(ray * rng.uniform(0.5, 30.0));
      REQUIRE(pr);
      CHECK((pr->uv - uv).norm() < 1e-6);
    }
  }
}

TEST_CASE("projection Jacobian against finite differences") {
  Rng rng(23);
  for (auto type : {DistortionType::kNone, DistortionType::kRadialTangential,
                    DistortionType::kEquidistant}) {
    const CameraModel cam = model_with(type);
    for (int i = 0; i < 100; ++i) {
      const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5));
      const auto pr = cam.project(p);
      REQUIRE(pr);
      Mat23 J;
      for (int k = 0; k < 3; ++k) {
        Vec3 d = Vec3::Zero();
        d(k) = 1e-6;
        J.col(k) = (cam.project(p + d)->uv - cam.project(p - d)->uv) / 2e-6;
      }
      CHECK(testutil::rel_diff(pr->jacobian, J) < 1e-6);
    }
  }
}

TEST_CASE("reprojection error definition") {
  Rng rng(24);
  const CameraRig rig = CameraRig::stereo_default();
  for (int i = 0; i < 50; ++i) {
    const Pose T = rng.pose();
    const int cam = i % 2;
    const Vec3 l = visible_point(rng, rig, cam, T);
    const Vec2 z = rig.cameras[cam].project(point_in_camera(rig, cam, T, l))->uv;
    const Vec4 lh(l.x(), l.y(), l.z(), 1.0);
    CHECK(reprojection_error(rig, cam, T, lh, z)->error.norm() < 1e-9);
    CHECK((reprojection_error(rig, cam, T, lh, z + Vec2(1, 0))->error - Vec2(1, 0)).norm() < 1e-9);
  }
  // behind the camera
  const Vec4 behind(-5, 0, 0, 1);
  CHECK_FALSE(reprojection_error(rig, 0, Pose::identity(), behind, Vec2(0, 0)));
}

TEST_CASE("reprojection Jacobians against finite differences") {
  Rng rng(25);
  for (auto type : {DistortionType::kNone, DistortionType::kRadialTangential,
                    DistortionType::kEquidistant}) {
    const CameraRig rig = rig_with(type);
    int worst_ok = 0;
    for (int i = 0; i < 100; ++i) {
      const Pose T = rng.pose();
      const int cam = i % 2;
      const Vec3 l = visible_point(rng, rig, cam, T);
      const Vec4 lh(l.x(), l.y(), l.z(), 1.0);
      const Vec2 z(rng.uniform(0, 640), rng.uniform(0, 480));
      const auto res = reprojection_error(rig, cam, T, lh, z);
      REQUIRE(res);
      const auto Jp = testutil::numeric_jacobian<2>(6, [&](const VecX& d) {
        return reprojection_error(rig, cam, T.box_plus(Vec6(d)), lh, z)->error;
      });
      const auto Jl = testutil::numeric_jacobian<2>(3, [&](const VecX& d) {
        const Vec4 lp = lh + Vec4(d(0), d(1), d(2), 0.0);
        return reprojection_error(rig, cam, T, lp, z)->error;
      });
      const bool ok = testutil::rel_diff(res->J_pose, Jp) < 1e-5 &&
                      testutil::rel_diff(res->J_landmark, Jl) < 1e-5;
      CHECK(ok);
      worst_ok += ok;
    }
    CHECK(worst_ok == 100);
  }
}

TEST_CASE("reprojection error is frame consistent") {
  Rng rng(26);
  const CameraRig rig = CameraRig::stereo_default();
  for (int i = 0; i < 100; ++i) {
    const Pose T = rng.pose();
    const Vec3 l = visible_point(rng, rig, 0, T);
    const Vec2 z(300, 200);
    const Pose G = rng.pose(10.0);
    const Vec3 lg = G.transform(l);
    const Vec2 e1 = reprojection_error(rig, 0, T, Vec4(l.x(), l.y(), l.z(), 1), z)->error;
    const Vec2 e2 = reprojection_error(rig, 0, G * T, Vec4(lg.x(), lg.y(), lg.z(), 1), z)->error;
    CHECK((e1 - e2).norm() < 1e-10);
  }
}

TEST_CASE("rig validation") {
  CameraRig rig;
  CHECK_THROWS_AS(rig.validate(), std::invalid_argument);
  rig = CameraRig::stereo_default();
  rig.T_SC.pop_back();
  CHECK_THROWS_AS(rig.validate(), std::invalid_argument);
  CHECK(distortion_from_string("radtan") == DistortionType::kRadialTangential);
  CHECK_THROWS(distortion_from_string("fisheye9"));
}
