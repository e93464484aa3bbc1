#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "vigraph/sim.hpp"

using namespace vigraph;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vigraph_test_sim_" + name);
  std::filesystem::remove_all(p);
  return p;
}

SimSpec quiet_circle(double duration) {
  SimSpec s;
  s.trajectory.duration = duration;
  s.noise = NoiseSpec::none();
  return s;
}

}  // namespace

TEST_CASE("rest spec gives exact gravity reaction and zero rate") {
  SimSpec s = quiet_circle(3.0);
  s.trajectory.kind = TrajectoryKind::kRest;
  s.landmarks.center = Vec3(0, 0, 0);
  const SimDataset ds = generate(s, 1);
  for (const auto& m : ds.imu) {
    CHECK(m.gyro.norm() == 0.0);
    CHECK((m.accel - Vec3(0, 0, s.imu.g)).norm() < 1e-15);
  }
  CHECK(integrate_check(ds) == 0.0);
}

TEST_CASE("circle centripetal acceleration is R w^2") {
  SimSpec s = quiet_circle(20.0);
  s.trajectory.height_amplitude = 0.0;
  s.trajectory.yaw_dither = s.trajectory.pitch_dither = s.trajectory.roll_dither = 0.0;
  const SimDataset ds = generate(s, 2);
  const double w = 2.0 * M_PI / s.trajectory.period;
  const double expected = s.trajectory.radius * w * w;
  const double t_steady = s.trajectory.preamble + s.trajectory.ramp;
  int checked = 0;
  for (std::size_t i = 0; i < ds.imu.size(); ++i) {
    if (ds.imu[i].t < t_steady + 1e-9) continue;
    // remove the gravity reaction in the body frame, what remains is horizontal
    const Mat3 R = ds.gt[i].x.q.toRotationMatrix();
    const Vec3 a_W = R * ds.imu[i].accel + s.imu.gravity();
    CHECK(std::abs(a_W.norm() - expected) < 1e-9);
    CHECK(std::abs(ds.imu[i].gyro.z() - w) < 1e-9);
    ++checked;
  }
  CHECK(checked > 1000);
}

TEST_CASE("kinematics are consistent with finite differences") {
  testutil::Rng rng(11);
  for (auto kind : {TrajectoryKind::kCircle, TrajectoryKind::kLissajous,
                    TrajectoryKind::kWaypointSpline}) {
    TrajectorySpec s;
    s.kind = kind;
    s.pitch_dither = 0.05;
    s.roll_dither = 0.04;
    s.waypoints = {Vec3(4, 0, 0), Vec3(2, 3, 0.5), Vec3(-3, 2, 0), Vec3(-2, -3, -0.3),
                   Vec3(2, -2, 0.2)};
    for (int trial = 0; trial < 30; ++trial) {
      const double t = rng.uniform(0.0, 30.0);
      const double h = 1e-5;
      const Kinematics k0 = trajectory_at(s, t - h), k = trajectory_at(s, t),
                       k1 = trajectory_at(s, t + h);
      CHECK((k.v - (k1.p - k0.p) / (2 * h)).norm() < 1e-6);
      CHECK((k.a - (k1.v - k0.v) / (2 * h)).norm() < 1e-5);
      const Vec3 w_fd = testutil::matrix_log(
                            k0.q.toRotationMatrix().transpose() * k1.q.toRotationMatrix()) /
                        (2 * h);
      CHECK((k.omega_B - w_fd).norm() < 1e-6);
    }
  }
}

TEST_CASE("closed spline interpolates its waypoints") {
  TrajectorySpec s;
  s.kind = TrajectoryKind::kWaypointSpline;
  s.waypoints = {Vec3(4, 0, 0), Vec3(0, 4, 1), Vec3(-4, 0, 0), Vec3(0, -4, -1)};
  s.preamble = 0.0;
  s.ramp = 1e-9;  // effectively constant rate from t = 0
  const double per_waypoint = s.period / 4.0;
  for (int i = 0; i < 4; ++i) {
    // u(t) = rate * (t - ramp/2) after the ramp
    const double t = i * per_waypoint + 0.5e-9;
    CHECK((trajectory_at(s, t).p - s.waypoints[i]).norm() < 1e-6);
  }
}

TEST_CASE("same seed gives byte-identical datasets") {
  SimSpec s;
  s.trajectory.duration = 5.0;
  const auto a = scratch("det_a"), b = scratch("det_b");
  write_dataset(generate(s, 42), a);
  write_dataset(generate(s, 42), b);
  for (const char* f : {"gt.csv", "imu.csv", "frames.jsonl", "landmarks.csv", "config.json"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  write_dataset(generate(s, 43), b);
  CHECK(slurp(a / "frames.jsonl") != slurp(b / "frames.jsonl"));
}

TEST_CASE("noise-free dead reckoning reproduces ground truth") {
  SUBCASE("circle 10 s") {
    const SimDataset ds = generate(quiet_circle(10.0), 3);
    CHECK(integrate_check(ds) < 1e-4);
  }
  SUBCASE("lissajous 20 s") {
    SimSpec s = quiet_circle(20.0);
    s.trajectory.kind = TrajectoryKind::kLissajous;
    const SimDataset ds = generate(s, 3);
    CHECK(integrate_check(ds) < 1e-3);
  }
}

TEST_CASE("observations satisfy the visibility invariant") {
  SimSpec s;
  s.trajectory.duration = 8.0;
  const SimDataset ds = generate(s, 5);
  for (const auto& f : ds.frames) {
    CHECK(static_cast<int>(f.observations.size()) >= s.landmarks.min_observations);
    const Pose T = ds.gt_at(f.t).x.pose();
    CHECK(std::abs(ds.gt_at(f.t).t - f.t) < 1e-12);
    for (const auto& o : f.observations) {
      const Vec3 p_C = point_in_camera(s.rig, o.cam, T, ds.landmarks.at(o.landmark));
      REQUIRE(p_C.z() > kMinDepth);
      const auto pr = s.rig.cameras[o.cam].project(p_C);
      REQUIRE(pr);
      CHECK(s.rig.cameras[o.cam].inside(pr->uv));
    }
  }
}

TEST_CASE("pixel noise and outlier statistics") {
  SimSpec s;
  s.trajectory.duration = 10.0;
  s.noise.pixel_sigma = 1.5;
  const SimDataset ds = generate(s, 7);
  double sum2 = 0.0;
  long n = 0, outliers = 0, total = 0;
  for (const auto& f : ds.frames) {
    const Pose T = ds.gt_at(f.t).x.pose();
    for (const auto& o : f.observations) {
      ++total;
      if (o.outlier) {
        ++outliers;
        continue;
      }
      const auto pr = s.rig.cameras[o.cam].project(
          point_in_camera(s.rig, o.cam, T, ds.landmarks.at(o.landmark)));
      const Vec2 d = o.uv - pr->uv;
      sum2 += d.squaredNorm();
      n += 2;
    }
  }
  REQUIRE(n >= 10000);
  const double sigma = std::sqrt(sum2 / n);
  CHECK(std::abs(sigma - 1.5) / 1.5 < 0.05);
  const double frac = static_cast<double>(outliers) / total;
  CHECK(std::abs(frac - 0.02) < 0.005);
}

TEST_CASE("outlier rate does not change the inlier noise or the IMU stream") {
  SimSpec a;
  a.trajectory.duration = 4.0;
  SimSpec b = a;
  b.noise.outlier_fraction = 0.0;
  const SimDataset da = generate(a, 9), db = generate(b, 9);
  REQUIRE(da.frames.size() == db.frames.size());
  for (std::size_t i = 0; i < da.imu.size(); ++i) {
    CHECK(da.imu[i].accel == db.imu[i].accel);
  }
  for (std::size_t f = 0; f < da.frames.size(); ++f) {
    REQUIRE(da.frames[f].observations.size() == db.frames[f].observations.size());
    for (std::size_t k = 0; k < da.frames[f].observations.size(); ++k) {
      const auto& oa = da.frames[f].observations[k];
      const auto& ob = db.frames[f].observations[k];
      CHECK_FALSE(ob.outlier);
      if (!oa.outlier) CHECK(oa.uv == ob.uv);
    }
  }
}

TEST_CASE("dataset round trip through files") {
  SimSpec s;
  s.trajectory.duration = 3.0;
  s.trajectory.kind = TrajectoryKind::kLissajous;
  s.rig.cameras[0].distortion.type = DistortionType::kRadialTangential;
  s.rig.cameras[0].distortion.k = {0.01, -0.002, 1e-4, -2e-4};
  const SimDataset ds = generate(s, 12);
  const auto dir = scratch("roundtrip");
  write_dataset(ds, dir);
  const SimDataset back = read_dataset(dir);
  CHECK(back.seed == 12);
  CHECK(back.spec.trajectory.kind == TrajectoryKind::kLissajous);
  CHECK(back.spec.rig.cameras[0].distortion.k[3] == -2e-4);
  REQUIRE(back.gt.size() == ds.gt.size());
  REQUIRE(back.imu.size() == ds.imu.size());
  REQUIRE(back.frames.size() == ds.frames.size());
  for (std::size_t i = 0; i < ds.gt.size(); ++i) {
    CHECK(back.gt[i].t == ds.gt[i].t);
    CHECK(back.gt[i].x.r == ds.gt[i].x.r);
    CHECK(back.gt[i].x.q.coeffs() == ds.gt[i].x.q.coeffs());
    CHECK(back.imu[i].gyro == ds.imu[i].gyro);
  }
  for (std::size_t f = 0; f < ds.frames.size(); ++f) {
    const auto& a = ds.frames[f].observations;
    const auto& b = back.frames[f].observations;
    REQUIRE(a.size() == b.size());
    // written grouped by camera; both orders list cam 0 first for this rig
    std::size_t matched = 0;
    for (const auto& o : a) {
      for (const auto& p : b) {
        if (p.landmark == o.landmark && p.cam == o.cam) {
          CHECK(p.uv == o.uv);
          CHECK(p.outlier == o.outlier);
          ++matched;
        }
      }
    }
    CHECK(matched == a.size());
  }
  CHECK(back.landmarks == ds.landmarks);
  // rewriting the loaded dataset gives the same bytes
  const auto dir2 = scratch("roundtrip2");
  write_dataset(back, dir2);
  CHECK(slurp(dir / "imu.csv") == slurp(dir2 / "imu.csv"));
  CHECK(slurp(dir / "config.json") == slurp(dir2 / "config.json"));
}

TEST_CASE("invalid specs and datasets are rejected") {
  SimSpec s;
  s.trajectory.imu_rate = 205.0;
  CHECK_THROWS_AS(generate(s, 1), std::invalid_argument);
  s = SimSpec();
  s.landmarks.count = 10;
  s.trajectory.duration = 2.0;
  CHECK_THROWS_AS(generate(s, 1), DatasetError);
  CHECK_THROWS_AS(sim_spec_from_json(nlohmann::json::parse(R"({"trajectory":{"kind":"zigzag"}})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(sim_spec_from_json(nlohmann::json::parse(R"({"noise":{"pixel_sigma":"x"}})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(read_dataset(scratch("missing")), DatasetError);
  const auto dir = scratch("broken");
  SimSpec ok;
  ok.trajectory.duration = 2.0;
  write_dataset(generate(ok, 1), dir);
  std::ofstream(dir / "imu.csv") << "t,gx,gy,gz,ax,ay,az\n0,1,2\n";
  CHECK_THROWS_AS(read_dataset(dir), DatasetError);
}
