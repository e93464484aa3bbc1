#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "vigraph/estimator.hpp"
#include "vigraph/pipeline.hpp"

using namespace vigraph;
using testutil::Rng;

namespace {

constexpr double kPi = 3.14159265358979323846;

CameraRig mono_rig() {
  CameraRig rig;
  rig.cameras.push_back(CameraModel{});
  rig.T_SC.push_back(Pose());
  return rig;
}

SimObservation kp(double u, double v, LandmarkId tag = 0) { return {tag, 0, Vec2(u, v), false}; }

// union-find for the brute-force spanning tree oracle
struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[a] = b;
    return true;
  }
};

SimDataset short_circle(double duration, bool noisy, std::uint64_t seed) {
  SimSpec s;
  s.trajectory.duration = duration;
  if (!noisy) s.noise = NoiseSpec::none();
  return generate(s, seed);
}

}  // namespace

TEST_CASE("overlap of disjoint equal circles with one counted is one half") {
  const CameraRig rig = mono_rig();
  const std::vector<SimObservation> k{kp(100, 100), kp(300, 300)};
  CHECK(overlap_fraction(rig, k, {true, false}, 15.0, 1) == 0.5);
  CHECK(overlap_fraction(rig, k, {true, true}, 15.0, 1) == 1.0);
  CHECK(overlap_fraction(rig, k, {false, false}, 15.0, 1) == 0.0);
  CHECK(overlap_fraction(rig, {}, {}, 15.0, 1) == 0.0);
  CHECK_THROWS(overlap_fraction(rig, k, {true}, 15.0, 1));
}

TEST_CASE("overlap of two intersecting circles matches the lens area") {
  const CameraRig rig = mono_rig();
  const double r = 15.0, d = 15.0;
  const std::vector<SimObservation> k{kp(200, 200), kp(200 + d, 200)};
  const double lens = 2 * r * r * std::acos(d / (2 * r)) - 0.5 * d * std::sqrt(4 * r * r - d * d);
  const double expected = kPi * r * r / (2 * kPi * r * r - lens);
  CHECK(overlap_fraction(rig, k, {true, false}, r, 1) == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("overlap of the left half of a keypoint grid") {
  const CameraRig rig = mono_rig();
  std::vector<SimObservation> k;
  std::vector<bool> counted;
  for (double u = 20; u < 640; u += 40) {
    for (double v = 20; v < 480; v += 40) {
      k.push_back(kp(u, v));
      counted.push_back(u < 320);
    }
  }
  CHECK(std::abs(overlap_fraction(rig, k, counted, 15.0, 4) - 0.5) < 0.02);
}

TEST_CASE("spanning tree of the three-node example") {
  const std::map<FramePair, int> w{{{1, 2}, 10}, {{1, 3}, 3}, {{2, 3}, 5}};
  const auto t = max_spanning_tree({1, 2, 3}, w);
  CHECK(t == std::vector<FramePair>{{1, 2}, {2, 3}});

  SUBCASE("equal weights go in id order") {
    const std::map<FramePair, int> tie{{{1, 2}, 4}, {{1, 3}, 4}, {{2, 3}, 4}};
    CHECK(max_spanning_tree({1, 2, 3}, tie) == std::vector<FramePair>{{1, 2}, {1, 3}});
  }
  SUBCASE("isolated node gives a forest") {
    CHECK(max_spanning_tree({1, 2, 3, 9}, w).size() == 2);
  }
  SUBCASE("zero weight is no edge") {
    const std::map<FramePair, int> z{{{1, 2}, 0}, {{2, 3}, 1}};
    CHECK(max_spanning_tree({1, 2, 3}, z) == std::vector<FramePair>{{2, 3}});
  }
}

TEST_CASE("spanning tree weight matches brute force on random graphs") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 5;
    std::vector<FrameId> nodes{0, 1, 2, 3, 4};
    std::vector<std::pair<FramePair, int>> edges;
    std::map<FramePair, int> w;
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        const int x = static_cast<int>(rng.uniform(1, 20));
        w[{a, b}] = x;
        edges.push_back({{a, b}, x});
      }
    }
    int best = 0;
    const int m = static_cast<int>(edges.size());
    for (int mask = 0; mask < (1 << m); ++mask) {
      if (__builtin_popcount(mask) != n - 1) continue;
      Dsu dsu(n);
      int total = 0;
      bool tree = true;
      for (int e = 0; e < m && tree; ++e) {
        if (!(mask >> e & 1)) continue;
        tree = dsu.unite(static_cast<int>(edges[e].first.first),
                         static_cast<int>(edges[e].first.second));
        total += edges[e].second;
      }
      if (tree) best = std::max(best, total);
    }
    const auto t = max_spanning_tree(nodes, w);
    REQUIRE(t.size() == static_cast<std::size_t>(n - 1));
    int got = 0;
    for (const auto& e : t) got += w.at(e);
    CHECK(got == best);
  }
}

TEST_CASE("variable state count") {
  std::vector<double> t;
  for (int i = 0; i < 30; ++i) t.push_back(0.1 * i);
  CHECK(variable_state_count(t, 12, 2.0) == 20);

  std::vector<double> burst;
  for (int i = 0; i < 100; ++i) burst.push_back(0.01 * i);
  CHECK(variable_state_count(burst, 12, 2.0) == 100);

  CHECK(variable_state_count(std::vector<double>{0, 1, 2, 3, 4}, 12, 2.0) == 12);
  CHECK(variable_state_count(std::vector<double>{}, 12, 2.0) == 12);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> ts;
    double now = 0;
    const int n = static_cast<int>(rng.uniform(1, 60));
    for (int i = 0; i < n; ++i) {
      now += rng.uniform(0.01, 0.3);
      ts.push_back(now);
    }
    int inside = 0;
    for (double x : ts) inside += now - x < 2.0 - 1e-9;
    CHECK(variable_state_count(ts, 12, 2.0) == std::max(12, inside));
  }
}

TEST_CASE("ray intersection") {
  SUBCASE("rays aimed at one point meet there") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const Vec3 p = rng.vec3(-5, 5);
      std::vector<Ray> rays;
      for (int i = 0; i < 3; ++i) {
        const Pose T = rng.pose(3.0);
        rays.push_back({T, T.q.conjugate() * (p - T.r)});
      }
      const auto x = intersect_rays(rays);
      REQUIRE(x);
      CHECK((*x - p).norm() < 1e-9);
    }
  }
  SUBCASE("two skew lines give the midpoint of the common perpendicular") {
    const std::vector<Ray> rays{{Pose(), Vec3::UnitX()},
                                {Pose(Vec3(0, 0, 1), Quat::Identity()), Vec3::UnitY()}};
    const auto x = intersect_rays(rays);
    REQUIRE(x);
    CHECK((*x - Vec3(0, 0, 0.5)).norm() < 1e-12);
  }
  SUBCASE("degenerate") {
    const std::vector<Ray> parallel{{Pose(), Vec3::UnitX()},
                                    {Pose(Vec3(0, 1, 0), Quat::Identity()), Vec3::UnitX()}};
    CHECK_FALSE(intersect_rays(parallel));
    CHECK_FALSE(intersect_rays(std::span<const Ray>(parallel.data(), 1)));
  }
}

TEST_CASE("estimator config json") {
  EstimatorConfig c;
  c.window.a_min = 7;
  c.loop.cooldown_frames = 3;
  c.solver.max_iterations = 4;
  const auto j = to_json(c);
  CHECK(to_json(estimator_config_from_json(j)) == j);

  const auto partial = estimator_config_from_json(nlohmann::json::parse(R"({"window":{"recent":4}})"));
  CHECK(partial.window.recent == 4);
  CHECK(partial.window.max_keyframes == EstimatorConfig{}.window.max_keyframes);

  CHECK_THROWS_AS(estimator_config_from_json(nlohmann::json::parse(R"({"windw":{}})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(estimator_config_from_json(nlohmann::json::parse(R"({"window":{"foo":1}})")),
                  std::invalid_argument);
  EstimatorConfig bad;
  bad.prior.sigma_v = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(mode_from_string("slam") == Mode::kSlam);
  CHECK_THROWS(mode_from_string("vo"));
}

TEST_CASE("estimator window bookkeeping on a noiseless circle") {
  const SimDataset ds = short_circle(8.0, false, 21);
  const EstimatorConfig cfg = config_for_dataset(ds, {});
  int checked_imu = 0;
  int frames = 0;
  bool saw_posegraph = false;

  const RunResult run = run_estimator(ds, cfg, Mode::kVio, [&](const Estimator& est) {
    ++frames;
    const FactorGraph& g = est.graph();
    const WindowStats w = est.window_stats();
    CHECK(w.recent <= cfg.window.recent);
    CHECK(w.keyframes <= cfg.window.max_keyframes);
    CHECK(w.loop <= cfg.window.max_loop_frames);
    CHECK(w.states == static_cast<int>(g.states.size()));

    // newest A states free, the rest fixed
    std::vector<double> times;
    for (const auto& [id, s] : g.states) times.push_back(s.t);
    int inside = 0;
    for (double t : times) inside += times.back() - t < cfg.window.delta_t - 1e-9;
    const int A = std::max(cfg.window.a_min, inside);
    CHECK(w.variable_limit == A);
    CHECK(w.variable_states == std::min<int>(A, static_cast<int>(times.size())));

    // IMU factors chain consecutive states
    std::vector<FrameId> ids;
    for (const auto& [id, s] : g.states) ids.push_back(id);
    REQUIRE(g.imu_factors.size() + 1 == ids.size());
    std::vector<std::pair<FrameId, FrameId>> links;
    for (const auto& f : g.imu_factors) links.push_back({f.frame_k, f.frame_n});
    std::sort(links.begin(), links.end());
    for (std::size_t i = 0; i < links.size(); ++i) {
      CHECK(links[i] == std::make_pair(ids[i], ids[i + 1]));
    }

    // merged factors equal a fresh integration over the whole interval
    if (frames % 10 == 0) {
      for (const auto& f : g.imu_factors) {
        const auto samples = slice_imu(ds.imu, f.t0(), f.t1());
        const auto fresh = PreintegratedImu::integrate(samples, g.imu, f.bg_lin(), f.ba_lin());
        CHECK((fresh.delta_p() - f.delta_p()).norm() < 1e-9);
        CHECK((fresh.delta_v() - f.delta_v()).norm() < 1e-9);
        CHECK(fresh.delta_q().angularDistance(f.delta_q()) < 1e-9);
        CHECK(g.states.at(f.frame_k).t == f.t0());
        CHECK(g.states.at(f.frame_n).t == f.t1());
        ++checked_imu;
      }
    }

    for (const auto& f : g.two_pose) {
      CHECK(g.states.contains(f.ref));
      CHECK(g.states.contains(f.other));
    }
    for (const auto& [id, e] : est.frames()) {
      if (e.set != FrameSet::kPosegraph) continue;
      saw_posegraph = true;
      CHECK(std::none_of(g.observations.begin(), g.observations.end(),
                         [&](const auto& o) { return o.frame == id; }));
    }
    for (const auto& o : g.observations) CHECK(g.landmarks.contains(o.landmark));
  });

  CHECK(checked_imu > 0);
  CHECK(saw_posegraph);
  REQUIRE(run.causal.size() == ds.frames.size());
  REQUIRE(run.final.size() == ds.frames.size());
  const Trajectory gt = frame_ground_truth(ds);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    CHECK(run.final[i].t == gt[i].t);
  }
  CHECK(compute_ate(run.causal, gt, "causal").position.rmse < 1e-4);
  // dropped frames ride on their anchors
  CHECK(compute_ate(run.final, gt, "final").position.max < 1e-4);
}

TEST_CASE("demoting a keyframe archives its observations in two-pose factors") {
  const SimDataset ds = short_circle(8.0, true, 4);
  const EstimatorConfig cfg = config_for_dataset(ds, {});
  std::size_t most_factors = 0;
  run_estimator(ds, cfg, Mode::kVio, [&](const Estimator& est) {
    most_factors = std::max(most_factors, est.graph().two_pose.size());
    for (const auto& f : est.graph().two_pose) {
      CHECK(f.joint_landmarks >= cfg.two_pose.min_joint_landmarks);
      CHECK(est.frames().at(f.ref).keyframe);
      CHECK(est.frames().at(f.other).keyframe);
    }
  });
  CHECK(most_factors > 0);
}

TEST_CASE("estimator output is deterministic") {
  const SimDataset ds = short_circle(4.0, true, 9);
  const EstimatorConfig cfg = config_for_dataset(ds, {});
  const RunResult a = run_estimator(ds, cfg, Mode::kVio);
  const RunResult b = run_estimator(ds, cfg, Mode::kVio);
  REQUIRE(a.causal.size() == b.causal.size());
  for (std::size_t i = 0; i < a.causal.size(); ++i) {
    CHECK(tum_line(a.causal[i]) == tum_line(b.causal[i]));
  }
}
