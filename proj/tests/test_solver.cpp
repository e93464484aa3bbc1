#include "doctest.h"
#include "two_frame_fixture.hpp"
#include "vigraph/solver.hpp"

using namespace vigraph;
using testutil::Rng;

namespace {

// Three states linked by IMU factors, observing landmarks with both cameras.
FactorGraph small_graph(Rng& rng, double pixel_noise, double state_noise) {
  FactorGraph g;
  g.rig = CameraRig::stereo_default();
  const auto imu = testutil::random_imu(rng, 41);
  NavState x;
  x.q = quat_exp(rng.vec3(-0.2, 0.2));
  x.v = Vec3(1.0, 0.2, 0.0);
  x.bg = rng.vec3(-1e-3, 1e-3);
  x.ba = rng.vec3(-1e-2, 1e-2);
  std::vector<NavState> truth{x};
  for (int k = 0; k < 2; ++k) {
    const std::vector<ImuSample> s(imu.begin() + 20 * k, imu.begin() + 20 * k + 21);
    auto pre = PreintegratedImu::integrate(s, g.imu, x.bg, x.ba);
    pre.frame_k = k;
    pre.frame_n = k + 1;
    x = predict(x, pre, g.imu);
    truth.push_back(x);
    g.imu_factors.push_back(pre);
  }
  for (int k = 0; k < 3; ++k) {
    StateVariable s;
    s.x = truth[k];
    s.t = 0.1 * k;
    if (k > 0) {
      Vec15 d;
      for (int i = 0; i < 15; ++i) d(i) = rng.normal(state_noise);
      d.tail<6>() *= 0.01;
      s.x = s.x.box_plus(d);
    }
    g.states[k] = s;
  }
  g.states[0].pose_fixed = true;
  for (int j = 0; j < 6; ++j) {
    const Vec3 l = truth[0].pose().transform(Vec3(rng.uniform(4, 8), rng.uniform(-2, 2), rng.uniform(-1.5, 1.5)));
    g.landmarks[j] = LandmarkVariable{l + rng.gaussian3(state_noise), j, false};
    for (int k = 0; k < 3; ++k) {
      for (int cam = 0; cam < 2; ++cam) {
        const auto pr = g.rig.cameras[cam].project(point_in_camera(g.rig, cam, truth[k].pose(), l));
        if (!pr) continue;
        g.observations.push_back({k, j, cam, pr->uv + Vec2(rng.normal(pixel_noise), rng.normal(pixel_noise)), Mat2::Identity()});
      }
    }
  }
  return g;
}

}  // namespace

TEST_CASE("Cauchy loss definition") {
  FactorGraph g;
  g.rig = CameraRig::stereo_default();
  StateVariable s;
  g.states[0] = s;
  g.landmarks[0] = LandmarkVariable{Vec3(5, 0, 0), kNoTag, false};
  const Vec2 z = g.rig.cameras[0].project(point_in_camera(g.rig, 0, Pose::identity(), Vec3(5, 0, 0)))->uv;
  g.observations.push_back({0, 0, 0, z, Mat2::Identity() * 4.0});
  CHECK(total_cost(g) == doctest::Approx(0.0).epsilon(1e-12));
  g.observations[0].measurement += Vec2(1.5, -2.0);
  const double s_sq = 4.0 * (1.5 * 1.5 + 2.0 * 2.0);
  const double b = 3.0;
  CHECK(std::abs(total_cost(g, b) - 0.5 * b * b * std::log(1 + s_sq / (b * b))) < 1e-12);
}

TEST_CASE("total cost is the sum of per-factor costs") {
  Rng rng(60);
  for (int trial = 0; trial < 10; ++trial) {
    FactorGraph g = small_graph(rng, 1.0, 0.02);
    TwoPoseFactor f;
    f.ref = 0;
    f.other = 2;
    f.T_lin = Pose(rng.vec3(), rng.quat());
    f.e0 = Vec6::Random() * 0.1;
    Mat6 A = Mat6::Random();
    f.W = A * A.transpose();
    f.sqrt_W = A.transpose();
    g.two_pose.push_back(f);
    double expected = 0.0;
    for (const auto& o : g.observations) {
      const Vec3 l = g.landmarks.at(o.landmark).p_W;
      const auto r = reprojection_error(g.rig, o.cam, g.states.at(o.frame).x.pose(), Vec4(l.x(), l.y(), l.z(), 1), o.measurement);
      if (!r) continue;
      const double s = r->error.dot(o.information * r->error);
      expected += 0.5 * 9.0 * std::log(1 + s / 9.0);
    }
    for (const auto& pre : g.imu_factors) {
      const auto e = imu_error(g.states.at(pre.frame_k).x, g.states.at(pre.frame_n).x, pre, g.imu);
      expected += 0.5 * e.error.dot(e.W * e.error);
    }
    const auto e = eval_two_pose_error(f, g.states.at(0).x.pose(), g.states.at(2).x.pose());
    expected += 0.5 * e.error.dot(f.W * e.error);
    CHECK(std::abs(total_cost(g) - expected) < 1e-12 * std::max(1.0, expected) * 10);
  }
}

TEST_CASE("gradient matches finite differences") {
  Rng rng(61);
  for (int trial = 0; trial < 10; ++trial) {
    FactorGraph g = small_graph(rng, 1.0, 0.02);
    CHECK(marginal_step_check(g) < 1e-4);
  }
  SUBCASE("everything fixed") {
    FactorGraph g = small_graph(rng, 1.0, 0.02);
    for (auto& [id, s] : g.states) s.pose_fixed = s.speed_bias_fixed = true;
    for (auto& [id, l] : g.landmarks) l.fixed = true;
    CHECK(marginal_step_check(g) == 0.0);
  }
  SUBCASE("with a speed/bias prior") {
    FactorGraph g = small_graph(rng, 1.0, 0.02);
    SpeedBiasPrior prior;
    prior.frame = 1;
    prior.mean << 0.5, 0.1, 0.0, 1e-3, 0.0, -1e-3, 0.02, 0.0, 0.01;
    prior.sigma << 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.1, 0.1, 0.1;
    g.priors.push_back(prior);
    CHECK(marginal_step_check(g) < 1e-4);
    const double before = total_cost(g);
    g.priors.clear();
    CHECK(before > total_cost(g));
  }
  SUBCASE("saturated outlier") {
    FactorGraph g = small_graph(rng, 1.0, 0.02);
    g.observations[3].measurement += Vec2(60, -45);
    CHECK(marginal_step_check(g) < 1e-4);
  }
}

TEST_CASE("already optimal graph") {
  Rng rng(62);
  FactorGraph g = small_graph(rng, 0.0, 0.0);
  const auto rep = optimize(g);
  CHECK(rep.converged);
  CHECK(rep.iterations <= 2);
  CHECK(std::abs(rep.final_cost - rep.initial_cost) < 1e-12);
}

TEST_CASE("zero-noise pose recovery") {
  Rng rng(63);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = testutil::make_two_frame_problem(rng, 20, 0.0);
    FactorGraph g;
    g.rig = p.rig;
    StateVariable sr, sc;
    sr.x.set_pose(p.T_WSr);
    sr.pose_fixed = sr.speed_bias_fixed = true;
    sc.speed_bias_fixed = true;
    sc.x.set_pose(p.T_WSc.box_plus((Vec6() << 0.1 / std::sqrt(3.0) * Vec3::Ones(), Vec3(0.05, 0, 0)).finished()));
    g.states = {{p.r, sr}, {p.c, sc}};
    for (const auto& [id, lm] : p.landmarks) g.landmarks[id] = LandmarkVariable{lm.p_W, lm.tag, false};
    g.observations = p.observations;
    SolverOptions opt;
    opt.max_iterations = 50;
    const auto before_r = g.states.at(p.r).x;
    const auto rep = optimize(g, opt);
    CHECK(rep.final_cost <= rep.initial_cost);
    CHECK(translation_distance(g.states.at(p.c).x.pose(), p.T_WSc) < 1e-6);
    CHECK(rotation_angle(g.states.at(p.c).x.pose(), p.T_WSc) < 1e-6);
    // fixed state untouched
    CHECK(g.states.at(p.r).x.r == before_r.r);
    CHECK(g.states.at(p.r).x.q.coeffs() == before_r.q.coeffs());
  }
}

TEST_CASE("posegraph chain returns to consistency") {
  Rng rng(64);
  FactorGraph g;
  g.rig = CameraRig::stereo_default();
  std::vector<Pose> poses;
  Pose T;
  for (int k = 0; k < 6; ++k) {
    poses.push_back(T);
    StateVariable s;
    s.x.set_pose(T);
    s.speed_bias_fixed = true;
    s.pose_fixed = k == 0;
    g.states[k] = s;
    T = T * Pose(rng.vec3(), quat_exp(rng.vec3(-0.3, 0.3)));
  }
  for (int k = 0; k + 1 < 6; ++k) {
    TwoPoseFactor f;
    f.ref = k;
    f.other = k + 1;
    f.T_lin = poses[k].inverse() * poses[k + 1];
    f.W = Mat6::Identity() * 100.0;
    f.sqrt_W = Mat6::Identity() * 10.0;
    g.two_pose.push_back(f);
  }
  g.states[3].x.set_pose(poses[3].box_plus((Vec6() << 0.2, -0.1, 0.3, 0.05, 0.1, -0.08).finished()));
  SolverOptions opt;
  opt.max_iterations = 50;
  const auto rep = optimize(g, opt);
  CHECK(rep.converged);
  for (int k = 0; k < 6; ++k) {
    CHECK(translation_distance(g.states.at(k).x.pose(), poses[k]) < 1e-8);
    CHECK(rotation_angle(g.states.at(k).x.pose(), poses[k]) < 1e-8);
  }
}

TEST_CASE("landmark elimination step equals the dense step") {
  Rng rng(65);
  for (int trial = 0; trial < 10; ++trial) {
    FactorGraph g = small_graph(rng, 0.5, 0.01);
    // absolute accelerometer bias is barely observable over 0.2 s; keep the
    // comparison about landmark elimination, not about that conditioning
    for (auto& [id, s] : g.states) s.speed_bias_fixed = true;
    SolverOptions opt;
    opt.max_iterations = 1;
    const auto sys = assemble_dense(g, opt);
    const MatX H = sys.H + opt.initial_damping * MatX::Identity(sys.H.rows(), sys.H.cols());
    const VecX d = H.ldlt().solve(sys.b);
    FactorGraph dense = g;
    apply_dense_step(dense, sys, d);
    FactorGraph sparse = g;
    const auto rep = optimize(sparse, opt);
    REQUIRE(rep.final_cost < rep.initial_cost);
    for (const auto& [id, s] : g.states) {
      CHECK(nav_box_minus(sparse.states.at(id).x, dense.states.at(id).x).norm() < 1e-8);
    }
    for (const auto& [id, l] : g.landmarks) {
      CHECK((sparse.landmarks.at(id).p_W - dense.landmarks.at(id).p_W).norm() < 1e-8);
    }
  }
}

TEST_CASE("fixation masks hold exactly") {
  Rng rng(66);
  FactorGraph g = small_graph(rng, 1.0, 0.05);
  g.states[0].pose_fixed = false;
  g.states[0].gauge_fixed = true;
  g.states[1].speed_bias_fixed = true;
  g.landmarks[2].fixed = true;
  const FactorGraph before = g;
  SolverOptions opt;
  opt.max_iterations = 20;
  const auto rep = optimize(g, opt);
  CHECK(rep.final_cost < rep.initial_cost);
  CHECK(g.states[0].x.r == before.states.at(0).x.r);
  CHECK(std::abs(yaw_of(g.states[0].x.q) - yaw_of(before.states.at(0).x.q)) < 1e-2);
  CHECK(g.states[1].x.v == before.states.at(1).x.v);
  CHECK(g.states[1].x.bg == before.states.at(1).x.bg);
  CHECK(g.states[1].x.ba == before.states.at(1).x.ba);
  CHECK(g.landmarks[2].p_W == before.landmarks.at(2).p_W);
  CHECK(g.states[2].x.r != before.states.at(2).x.r);
}

TEST_CASE("non-finite input reports divergence") {
  Rng rng(67);
  FactorGraph g = small_graph(rng, 1.0, 0.02);
  g.observations[0].measurement.x() = std::numeric_limits<double>::quiet_NaN();
  OptReport rep;
  CHECK_NOTHROW(rep = optimize(g));
  CHECK(rep.diverged);
  CHECK_THROWS(SolverOptions{.max_iterations = 0}.validate());
}

TEST_CASE("graph validation") {
  Rng rng(68);
  FactorGraph g = small_graph(rng, 1.0, 0.02);
  CHECK_NOTHROW(g.validate());
  g.states.erase(2);
  CHECK_THROWS_AS(g.validate(), std::logic_error);
}
