#include "doctest.h"
#include "test_util.hpp"

using namespace vigraph;
using testutil::Rng;

TEST_CASE("quat_exp of zero and half turn") {
  const Quat q0 = quat_exp(Vec3::Zero());
  CHECK(q0.w() == 1.0);
  CHECK(q0.vec().norm() == 0.0);
  const Quat q = quat_exp(Vec3(M_PI, 0, 0));
  CHECK(std::abs(q.w()) < 1e-12);
  CHECK(std::abs(q.x() - 1.0) < 1e-12);
  CHECK(std::abs(q.y()) < 1e-12);
  CHECK(std::abs(q.z()) < 1e-12);
}

TEST_CASE("quat_exp matches Rodrigues") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Vec3 v = rng.vec3().normalized() * 0.3;
    const Mat3 R = quat_exp(v).toRotationMatrix();
    CHECK((R - testutil::rodrigues(v)).norm() < 1e-12);
  }
}

TEST_CASE("quat_exp is smooth through zero") {
  const Vec3 dir = Vec3(1, 2, 3).normalized();
  for (double a : {1e-12, 1e-9, 0.99e-8, 1.01e-8, 1e-7}) {
    const Quat q = quat_exp(a * dir);
    CHECK(std::abs(q.norm() - 1.0) < 1e-15);
    CHECK((q.vec() - 0.5 * a * dir).norm() < 1e-20 + 1e-3 * a * a);
  }
}

TEST_CASE("quat_log special values") {
  CHECK(quat_log(Quat::Identity()).norm() == 0.0);
  const Vec3 v = quat_log(Quat(0, 1, 0, 0));
  CHECK((v - Vec3(M_PI, 0, 0)).norm() < 1e-12);
}

TEST_CASE("quat_log of products matches matrix logarithm") {
  Rng rng(2);
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    const Quat q = rng.quat() * rng.quat();
    const Vec3 v = quat_log(q);
    CHECK(v.norm() <= M_PI + 1e-12);
    if (v.norm() > 3.0) continue;  // matrix log loses precision near pi
    CHECK((v - testutil::matrix_log(q.toRotationMatrix())).norm() < 1e-9);
    ++checked;
  }
  CHECK(checked > 400);
}

TEST_CASE("exp/log roundtrip") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 v = rng.vec3().normalized() * rng.uniform(0.0, M_PI - 1e-6);
    CHECK((quat_log(quat_exp(v)) - v).norm() < 1e-9);
  }
  for (double a : {0.0, 1e-12, 1e-9, 1e-7, 1e-4}) {
    const Vec3 v = a * Vec3(0.3, -0.2, 0.9).normalized();
    CHECK((quat_log(quat_exp(v)) - v).norm() < 1e-15);
  }
}

TEST_CASE("box_minus definitions") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const Quat q = rng.quat();
    const Quat qp = rng.quat();
    CHECK(box_minus(q, q).norm() < 1e-12);
    const Vec3 d(0.1, 0, 0);
    CHECK((box_minus(quat_exp(d) * qp, qp) - d).norm() < 1e-10);
    const Vec3 bm = box_minus(q, qp);
    const Quat back = quat_exp(bm) * qp;
    CHECK(std::abs(std::abs(back.dot(q)) - 1.0) < 1e-12);
    // direct composition via rotation matrices
    const Mat3 Rd = q.toRotationMatrix() * qp.toRotationMatrix().transpose();
    if (bm.norm() < 3.0) CHECK((bm - testutil::matrix_log(Rd)).norm() < 1e-9);
  }
}

TEST_CASE("perturbation consistency") {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const Quat q = rng.quat();
    const Vec3 d = rng.vec3() * 1e-3;
    CHECK((box_minus(box_plus(q, d), q) - d).norm() < 1e-9);
  }
}

TEST_CASE("canonical sign and normalization") {
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const Quat q = rng.quat();
    const Quat c = canonical(Quat(-2 * q.w(), -2 * q.x(), -2 * q.y(), -2 * q.z()));
    CHECK(c.w() >= 0.0);
    CHECK(std::abs(c.norm() - 1.0) < 1e-12);
    CHECK(std::abs(std::abs(c.dot(q)) - 1.0) < 1e-12);
  }
}

TEST_CASE("quaternion composition is associative") {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const Quat a = rng.quat(), b = rng.quat(), c = rng.quat();
    const Quat l = canonical((a * b) * c);
    const Quat r = canonical(a * (b * c));
    CHECK((l.coeffs() - r.coeffs()).norm() < 1e-12);
  }
}

TEST_CASE("transform_point") {
  Rng rng(8);
  const Vec4 p(1, 2, 3, 1);
  CHECK((Pose::identity().transform(p) - p).norm() == 0.0);
  const Pose t(Vec3(4, 5, 6), Quat::Identity());
  CHECK((t.transform(Vec4(0, 0, 0, 1)) - Vec4(4, 5, 6, 1)).norm() == 0.0);
  for (int i = 0; i < 200; ++i) {
    const Pose T = rng.pose();
    const Vec4 x(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 2));
    CHECK((T.transform(x) - T.matrix() * x).norm() < 1e-12);
  }
}

TEST_CASE("pose composition matches homogeneous matrices") {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const Pose a = rng.pose(), b = rng.pose();
    const Mat4 M = a.matrix() * b.matrix();
    CHECK((( a * b).matrix() - M).norm() < 1e-10);
    const Pose id = a * a.inverse();
    CHECK(id.r.norm() < 1e-10);
    CHECK(rotation_angle(id, Pose::identity()) < 1e-10);
  }
}

TEST_CASE("pose box_plus / box_minus roundtrip") {
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const Pose a = rng.pose();
    Vec6 d;
    d << rng.vec3(), rng.vec3() * 0.5;
    const Pose b = a.box_plus(d);
    CHECK((pose_box_minus(b, a) - d).norm() < 1e-10);
  }
}

TEST_CASE("SO(3) Jacobians against finite differences") {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const Vec3 phi = rng.vec3().normalized() * rng.uniform(1e-6, 2.5);
    // Exp(phi + d) = Exp(phi) Exp(Jr d)
    Mat3 Jr_num;
    for (int k = 0; k < 3; ++k) {
      Vec3 d = Vec3::Zero();
      d(k) = 1e-6;
      const Quat qp = quat_exp(phi).conjugate() * quat_exp(phi + d);
      const Quat qm = quat_exp(phi).conjugate() * quat_exp(phi - d);
      Jr_num.col(k) = (quat_log(qp) - quat_log(qm)) / 2e-6;
    }
    CHECK((right_jacobian(phi) - Jr_num).norm() < 1e-7);
    CHECK((right_jacobian(phi) * right_jacobian_inv(phi) - Mat3::Identity()).norm() < 1e-10);
    CHECK((left_jacobian(phi) * left_jacobian_inv(phi) - Mat3::Identity()).norm() < 1e-10);
  }
}

TEST_CASE("yaw and euler") {
  const Quat q = quat_from_euler_zyx(0.7, 0.1, -0.2);
  CHECK(std::abs(yaw_of(q) - 0.7) < 1e-12);
}
