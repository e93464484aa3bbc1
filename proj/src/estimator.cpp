#include "vigraph/estimator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <tuple>

#include <Eigen/Eigenvalues>

#include "json_util.hpp"

namespace vigraph {

using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

void WindowConfig::validate() const {
  if (recent < 2 || max_keyframes < 1 || max_loop_frames < 1 || a_min < 1 || !(delta_t > 0) ||
      !(keypoint_radius > 0) || !(overlap_threshold > 0) || !(overlap_threshold <= 1) ||
      raster_downsample < 1) {
    throw std::invalid_argument("window: invalid configuration");
  }
}

void FrontendConfig::validate() const {
  if (!(pixel_sigma > 0) || !(match_gate_px > 0) || !(triangulation_max_error_px > 0) ||
      !(min_depth > 0) || !(max_depth > min_depth) || init_samples < 1 || !(imu_gap_max > 0)) {
    throw std::invalid_argument("frontend: invalid configuration");
  }
}

void EstimatorConfig::validate() const {
  window.validate();
  frontend.validate();
  solver.validate();
  final_solver.validate();
  loop.validate();
  imu.validate();
  rig.validate();
  if (two_pose.min_joint_landmarks < 1 || !(two_pose.reprojection_gate_px > 0)) {
    throw std::invalid_argument("two_pose: invalid configuration");
  }
  if (!(prior.sigma_v > 0) || !(prior.sigma_bg > 0) || !(prior.sigma_ba > 0)) {
    throw std::invalid_argument("prior: sigmas must be positive");
  }
  if (!(relinearize.bg > 0) || !(relinearize.ba > 0)) {
    throw std::invalid_argument("relinearize: thresholds must be positive");
  }
}

std::string to_string(Mode mode) { return mode == Mode::kVio ? "vio" : "slam"; }

Mode mode_from_string(const std::string& name) {
  if (name == "vio") return Mode::kVio;
  if (name == "slam") return Mode::kSlam;
  throw std::invalid_argument("unknown mode '" + name + "'");
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("'" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; })) {
      throw std::invalid_argument("unknown key '" + k + "' in " + where);
    }
  }
}

json solver_json(const SolverOptions& o) {
  return {{"max_iterations", o.max_iterations},     {"initial_damping", o.initial_damping},
          {"max_damping", o.max_damping},           {"function_tolerance", o.function_tolerance},
          {"step_tolerance", o.step_tolerance},     {"cauchy_scale", o.cauchy_scale}};
}

void read_solver(const json& j, SolverOptions& o, const std::string& where) {
  check_keys(j, {"max_iterations", "initial_damping", "max_damping", "function_tolerance",
                 "step_tolerance", "cauchy_scale"},
             where);
  jsonutil::read(j, "max_iterations", o.max_iterations);
  jsonutil::read(j, "initial_damping", o.initial_damping);
  jsonutil::read(j, "max_damping", o.max_damping);
  jsonutil::read(j, "function_tolerance", o.function_tolerance);
  jsonutil::read(j, "step_tolerance", o.step_tolerance);
  jsonutil::read(j, "cauchy_scale", o.cauchy_scale);
}

}  // namespace

json to_json(const EstimatorConfig& c) {
  const WindowConfig& w = c.window;
  const FrontendConfig& f = c.frontend;
  const LoopConfig& l = c.loop;
  return {
      {"window",
       {{"recent", w.recent},
        {"max_keyframes", w.max_keyframes},
        {"max_loop_frames", w.max_loop_frames},
        {"a_min", w.a_min},
        {"delta_t", w.delta_t},
        {"keypoint_radius", w.keypoint_radius},
        {"overlap_threshold", w.overlap_threshold},
        {"raster_downsample", w.raster_downsample}}},
      {"frontend",
       {{"pixel_sigma", f.pixel_sigma},
        {"match_gate_px", f.match_gate_px},
        {"triangulation_max_error_px", f.triangulation_max_error_px},
        {"min_depth", f.min_depth},
        {"max_depth", f.max_depth},
        {"init_samples", f.init_samples},
        {"imu_gap_max", f.imu_gap_max}}},
      {"solver", solver_json(c.solver)},
      {"final_solver", solver_json(c.final_solver)},
      {"two_pose",
       {{"min_joint_landmarks", c.two_pose.min_joint_landmarks},
        {"reprojection_gate_px", c.two_pose.reprojection_gate_px}}},
      {"loop",
       {{"n_recent", l.n_recent},
        {"min_shared", l.min_shared},
        {"min_inliers", l.min_inliers},
        {"min_inlier_ratio", l.min_inlier_ratio},
        {"inlier_sigmas", l.inlier_sigmas},
        {"max_correction_m", l.max_correction_m},
        {"max_correction_deg", l.max_correction_deg},
        {"job_iterations", l.job_iterations},
        {"import_delay_frames", l.import_delay_frames},
        {"cooldown_frames", l.cooldown_frames},
        {"false_negative_rate", l.false_negative_rate},
        {"seed", l.seed}}},
      {"prior",
       {{"sigma_v", c.prior.sigma_v}, {"sigma_bg", c.prior.sigma_bg}, {"sigma_ba", c.prior.sigma_ba}}},
      {"relinearize", {{"bg", c.relinearize.bg}, {"ba", c.relinearize.ba}}},
      {"imu", imu_to_json(c.imu)},
      {"rig", rig_to_json(c.rig)},
  };
}

EstimatorConfig estimator_config_from_json(const json& j, EstimatorConfig c) {
  check_keys(j, {"window", "frontend", "solver", "final_solver", "two_pose", "loop", "prior",
                 "relinearize", "imu", "rig"},
             "config");
  if (j.contains("window")) {
    const json& s = j.at("window");
    check_keys(s, {"recent", "max_keyframes", "max_loop_frames", "a_min", "delta_t",
                   "keypoint_radius", "overlap_threshold", "raster_downsample"},
               "window");
    WindowConfig& w = c.window;
    jsonutil::read(s, "recent", w.recent);
    jsonutil::read(s, "max_keyframes", w.max_keyframes);
    jsonutil::read(s, "max_loop_frames", w.max_loop_frames);
    jsonutil::read(s, "a_min", w.a_min);
    jsonutil::read(s, "delta_t", w.delta_t);
    jsonutil::read(s, "keypoint_radius", w.keypoint_radius);
    jsonutil::read(s, "overlap_threshold", w.overlap_threshold);
    jsonutil::read(s, "raster_downsample", w.raster_downsample);
  }
  if (j.contains("frontend")) {
    const json& s = j.at("frontend");
    check_keys(s, {"pixel_sigma", "match_gate_px", "triangulation_max_error_px", "min_depth",
                   "max_depth", "init_samples", "imu_gap_max"},
               "frontend");
    FrontendConfig& f = c.frontend;
    jsonutil::read(s, "pixel_sigma", f.pixel_sigma);
    jsonutil::read(s, "match_gate_px", f.match_gate_px);
    jsonutil::read(s, "triangulation_max_error_px", f.triangulation_max_error_px);
    jsonutil::read(s, "min_depth", f.min_depth);
    jsonutil::read(s, "max_depth", f.max_depth);
    jsonutil::read(s, "init_samples", f.init_samples);
    jsonutil::read(s, "imu_gap_max", f.imu_gap_max);
  }
  if (j.contains("solver")) read_solver(j.at("solver"), c.solver, "solver");
  if (j.contains("final_solver")) read_solver(j.at("final_solver"), c.final_solver, "final_solver");
  if (j.contains("two_pose")) {
    const json& s = j.at("two_pose");
    check_keys(s, {"min_joint_landmarks", "reprojection_gate_px"}, "two_pose");
    jsonutil::read(s, "min_joint_landmarks", c.two_pose.min_joint_landmarks);
    jsonutil::read(s, "reprojection_gate_px", c.two_pose.reprojection_gate_px);
  }
  if (j.contains("loop")) {
    const json& s = j.at("loop");
    check_keys(s, {"n_recent", "min_shared", "min_inliers", "min_inlier_ratio", "inlier_sigmas",
                   "max_correction_m", "max_correction_deg", "job_iterations",
                   "import_delay_frames", "cooldown_frames", "false_negative_rate", "seed"},
               "loop");
    LoopConfig& l = c.loop;
    jsonutil::read(s, "n_recent", l.n_recent);
    jsonutil::read(s, "min_shared", l.min_shared);
    jsonutil::read(s, "min_inliers", l.min_inliers);
    jsonutil::read(s, "min_inlier_ratio", l.min_inlier_ratio);
    jsonutil::read(s, "inlier_sigmas", l.inlier_sigmas);
    jsonutil::read(s, "max_correction_m", l.max_correction_m);
    jsonutil::read(s, "max_correction_deg", l.max_correction_deg);
    jsonutil::read(s, "job_iterations", l.job_iterations);
    jsonutil::read(s, "import_delay_frames", l.import_delay_frames);
    jsonutil::read(s, "cooldown_frames", l.cooldown_frames);
    jsonutil::read(s, "false_negative_rate", l.false_negative_rate);
    jsonutil::read(s, "seed", l.seed);
  }
  if (j.contains("prior")) {
    const json& s = j.at("prior");
    check_keys(s, {"sigma_v", "sigma_bg", "sigma_ba"}, "prior");
    jsonutil::read(s, "sigma_v", c.prior.sigma_v);
    jsonutil::read(s, "sigma_bg", c.prior.sigma_bg);
    jsonutil::read(s, "sigma_ba", c.prior.sigma_ba);
  }
  if (j.contains("relinearize")) {
    const json& s = j.at("relinearize");
    check_keys(s, {"bg", "ba"}, "relinearize");
    jsonutil::read(s, "bg", c.relinearize.bg);
    jsonutil::read(s, "ba", c.relinearize.ba);
  }
  if (j.contains("imu")) {
    check_keys(j.at("imu"), {"sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "g", "rate"}, "imu");
    c.imu = imu_from_json(j.at("imu"), c.imu);
  }
  if (j.contains("rig")) c.rig = rig_from_json(j.at("rig"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// building blocks

double overlap_fraction(const CameraRig& rig, std::span<const SimObservation> keypoints,
                        const std::vector<bool>& counted, double radius_px, int downsample) {
  if (counted.size() != keypoints.size()) {
    throw std::invalid_argument("overlap: one flag per keypoint expected");
  }
  const double r = radius_px / downsample;
  long all_area = 0, counted_area = 0;
  for (int cam = 0; cam < rig.size(); ++cam) {
    const int w = (rig.cameras[cam].width + downsample - 1) / downsample;
    const int h = (rig.cameras[cam].height + downsample - 1) / downsample;
    std::vector<std::uint8_t> all(static_cast<std::size_t>(w) * h, 0), hit(all.size(), 0);
    for (std::size_t i = 0; i < keypoints.size(); ++i) {
      if (keypoints[i].cam != cam) continue;
      const Vec2 c = keypoints[i].uv / downsample;
      const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - r)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(c.x() + r)));
      const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - r)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(c.y() + r)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dx = x + 0.5 - c.x(), dy = y + 0.5 - c.y();
          if (dx * dx + dy * dy > r * r) continue;
          all[static_cast<std::size_t>(y) * w + x] = 1;
          if (counted[i]) hit[static_cast<std::size_t>(y) * w + x] = 1;
        }
      }
    }
    all_area += std::accumulate(all.begin(), all.end(), 0L);
    counted_area += std::accumulate(hit.begin(), hit.end(), 0L);
  }
  return all_area == 0 ? 0.0 : static_cast<double>(counted_area) / all_area;
}

std::vector<FramePair> max_spanning_tree(const std::vector<FrameId>& nodes,
                                         const std::map<FramePair, int>& weights) {
  std::map<FrameId, std::size_t> index;
  for (FrameId n : nodes) index.emplace(n, index.size());
  std::vector<std::pair<int, FramePair>> edges;
  for (const auto& [e, w] : weights) {
    if (w > 0 && index.contains(e.first) && index.contains(e.second) && e.first != e.second) {
      edges.push_back({w, e});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return std::minmax(a.second.first, a.second.second) <
           std::minmax(b.second.first, b.second.second);
  });
  std::vector<std::size_t> parent(index.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  std::vector<FramePair> out;
  for (const auto& [w, e] : edges) {
    const std::size_t a = find(index.at(e.first)), b = find(index.at(e.second));
    if (a == b) continue;
    parent[a] = b;
    out.push_back(std::minmax(e.first, e.second));
  }
  return out;
}

int variable_state_count(std::span<const double> times, int a_min, double delta_t) {
  if (times.empty()) return a_min;
  const double now = *std::max_element(times.begin(), times.end());
  const int a_dt = static_cast<int>(std::count_if(
      times.begin(), times.end(), [&](double t) { return t > now - delta_t + 1e-9; }));
  return std::max(a_min, a_dt);
}

std::optional<Vec3> intersect_rays(std::span<const Ray> rays) {
  if (rays.size() < 2) return std::nullopt;
  Mat3 A = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (const auto& ray : rays) {
    const Vec3 d = (ray.T_WC.q * ray.direction).normalized();
    const Mat3 P = Mat3::Identity() - d * d.transpose();
    A += P;
    b += P * ray.T_WC.r;
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(A);
  if (!(eig.eigenvalues()(0) > 1e-9 * rays.size())) return std::nullopt;
  const Vec3 p = A.ldlt().solve(b);
  if (!p.allFinite()) return std::nullopt;
  return p;
}

// ---------------------------------------------------------------------------
// estimator

namespace {

using Clock = std::chrono::steady_clock;

double lap(Clock::time_point& t) {
  const auto now = Clock::now();
  const double ms = std::chrono::duration<double, std::milli>(now - t).count();
  t = now;
  return ms;
}

std::map<FrameId, std::set<LandmarkId>> landmarks_by_frame(const FactorGraph& g) {
  std::map<FrameId, std::set<LandmarkId>> out;
  for (const auto& o : g.observations) out[o.frame].insert(o.landmark);
  return out;
}

int intersection_size(const std::set<LandmarkId>& a, const std::set<LandmarkId>& b) {
  int n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

int covis_in(const std::map<FrameId, std::set<LandmarkId>>& by_frame, FrameId a, FrameId b) {
  const auto ia = by_frame.find(a), ib = by_frame.find(b);
  if (ia == by_frame.end() || ib == by_frame.end()) return 0;
  return intersection_size(ia->second, ib->second);
}

void set_landmark_fixation(FactorGraph& g) {
  std::map<LandmarkId, int> count;
  for (const auto& o : g.observations) ++count[o.landmark];
  for (auto& [id, l] : g.landmarks) {
    const auto it = count.find(id);
    l.fixed = it == count.end() || it->second < 2;
  }
}

}  // namespace

Estimator::Estimator(EstimatorConfig config, Mode mode) : cfg_(std::move(config)), mode_(mode) {
  cfg_.validate();
  graph_.rig = cfg_.rig;
  graph_.imu = cfg_.imu;
}

Estimator::~Estimator() = default;

Mat2 Estimator::observation_information() const {
  return Mat2::Identity() / (cfg_.frontend.pixel_sigma * cfg_.frontend.pixel_sigma);
}

void Estimator::event(json e) { events_.push_back(std::move(e)); }

void Estimator::add_imu(std::span<const ImuSample> samples) {
  for (const auto& s : samples) {
    if (!imu_.empty() && !(s.t > imu_.back().t)) {
      throw DatasetError("IMU timestamps must be strictly increasing");
    }
    imu_.push_back(s);
  }
}

void Estimator::process(const SimFrame& frame) {
  const auto start = Clock::now();
  auto t = start;
  FrameTimings tm;
  if (last_frame_ >= 0 && (!(frame.t > last_t_) || frame.id <= last_frame_)) {
    throw DatasetError("frame " + std::to_string(frame.id) + " is not after the previous frame");
  }
  if (graph_.states.empty()) {
    initialize(frame);
  } else {
    ingest(frame);
  }
  frames_[frame.id] = FrameEntry{frame.id, frame.t, false, FrameSet::kRecent, frame.observations};
  associate(frame.id);
  tm.ingest = lap(t);

  FrameId current_keyframe = -1;
  const bool keyframe = keyframe_decision(frame.id, &current_keyframe);
  frames_.at(frame.id).keyframe = keyframe;
  tm.keyframe = lap(t);

  if (keyframe) {
    triangulate(frame.id);
    database_.push_back({frame.id, sorted_tags(frame.observations)});
  }
  tm.triangulate = lap(t);

  recent_.push_back(frame.id);
  maintain_window(frame.id, current_keyframe);
  tm.maintain_window = lap(t);

  if (mode_ == Mode::kSlam) import_job(frame.id);
  tm.import = lap(t);

  update_fixation();
  tm.fixation = lap(t);

  run_optimizer(cfg_.solver);
  tm.optimize = lap(t);

  if (mode_ == Mode::kSlam) loop_step(frame.id);
  tm.loop = lap(t);

  ++frame_count_;
  last_frame_ = frame.id;
  last_t_ = frame.t;
  tm.total = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  timings_.push_back(tm);
}

void Estimator::initialize(const SimFrame& frame) {
  std::vector<Vec3> accel;
  for (const auto& s : imu_) {
    if (s.t <= frame.t) accel.push_back(s.accel);
  }
  if (accel.empty()) throw DatasetError("no IMU samples before the first frame");
  const std::size_t n = std::min<std::size_t>(accel.size(), cfg_.frontend.init_samples);
  Vec3 mean = Vec3::Zero();
  for (std::size_t i = accel.size() - n; i < accel.size(); ++i) mean += accel[i];
  mean /= static_cast<double>(n);
  if (!(mean.norm() > 0)) throw DatasetError("zero accelerometer mean at initialization");

  // specific force at rest points up in the world
  Quat q = Quat::FromTwoVectors(mean.normalized(), Vec3::UnitZ());
  q = Quat(Eigen::AngleAxisd(-yaw_of(q), Vec3::UnitZ())) * q;
  StateVariable s;
  s.x.q = canonical(q);
  s.t = frame.t;
  graph_.states[frame.id] = s;

  SpeedBiasPrior prior;
  prior.frame = frame.id;
  prior.sigma << Vec3::Constant(cfg_.prior.sigma_v), Vec3::Constant(cfg_.prior.sigma_bg),
      Vec3::Constant(cfg_.prior.sigma_ba);
  graph_.priors.push_back(prior);
}

void Estimator::ingest(const SimFrame& frame) {
  const auto& [prev_id, prev] = *graph_.states.rbegin();
  std::vector<ImuSample> samples;
  try {
    samples = slice_imu(imu_, prev.t, frame.t);
  } catch (const std::out_of_range&) {
    throw DatasetError("IMU samples do not cover frame " + std::to_string(frame.id));
  }
  if (max_imu_gap(samples) > cfg_.frontend.imu_gap_max) {
    throw DatasetError("IMU gap larger than " + jsonutil::fmt(cfg_.frontend.imu_gap_max) +
                       " s before frame " + std::to_string(frame.id));
  }
  PreintegratedImu pre = PreintegratedImu::integrate(samples, graph_.imu, prev.x.bg, prev.x.ba);
  pre.frame_k = prev_id;
  pre.frame_n = frame.id;
  StateVariable s;
  s.x = predict(prev.x, pre, graph_.imu);
  s.t = frame.t;
  graph_.states[frame.id] = s;
  graph_.imu_factors.push_back(std::move(pre));
}

void Estimator::associate(FrameId f) {
  const Pose T = graph_.states.at(f).x.pose();
  std::set<std::pair<int, LandmarkId>> have;
  for (const auto& o : graph_.observations) {
    if (o.frame == f) have.emplace(o.cam, o.landmark);
  }
  const Mat2 W = observation_information();
  for (const auto& k : frames_.at(f).keypoints) {
    const LandmarkId id = index_.find(k.landmark);
    if (id < 0 || have.contains({k.cam, id})) continue;
    const auto p = graph_.rig.cameras[k.cam].project(
        point_in_camera(graph_.rig, k.cam, T, graph_.landmarks.at(id).p_W));
    if (!p || (p->uv - k.uv).norm() > cfg_.frontend.match_gate_px) continue;
    graph_.observations.push_back({f, id, k.cam, k.uv, W});
    have.emplace(k.cam, id);
  }
}

bool Estimator::keyframe_decision(FrameId f, FrameId* current_keyframe) {
  *current_keyframe = -1;
  std::vector<FrameId> window_keyframes(keyframes_.begin(), keyframes_.end());
  for (FrameId r : recent_) {
    if (frames_.at(r).keyframe) window_keyframes.push_back(r);
  }
  if (window_keyframes.empty()) return true;

  const auto& kps = frames_.at(f).keypoints;
  std::set<std::pair<int, LandmarkId>> observed;
  for (const auto& o : graph_.observations) {
    if (o.frame == f) observed.emplace(o.cam, o.landmark);
  }
  std::vector<bool> matched(kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) {
    const LandmarkId id = index_.find(kps[i].landmark);
    matched[i] = id >= 0 && observed.contains({kps[i].cam, id});
  }
  const WindowConfig& w = cfg_.window;
  const double o_l = overlap_fraction(graph_.rig, kps, matched, w.keypoint_radius, w.raster_downsample);

  std::sort(window_keyframes.begin(), window_keyframes.end());
  double best = -1.0;
  for (FrameId k : window_keyframes) {
    const auto tags = sorted_tags(frames_.at(k).keypoints);
    std::vector<bool> shared(kps.size());
    for (std::size_t i = 0; i < kps.size(); ++i) {
      shared[i] = std::binary_search(tags.begin(), tags.end(), kps[i].landmark);
    }
    const double o_k = overlap_fraction(graph_.rig, kps, shared, w.keypoint_radius, w.raster_downsample);
    if (o_k > best) {
      best = o_k;
      *current_keyframe = k;
    }
  }
  return std::min(o_l, best) < w.overlap_threshold;
}

void Estimator::triangulate(FrameId f) {
  struct RayObs {
    FrameId frame;
    int cam;
    Vec2 uv;
  };
  std::set<LandmarkId> candidates;
  for (const auto& k : frames_.at(f).keypoints) {
    if (index_.find(k.landmark) < 0) candidates.insert(k.landmark);
  }
  if (candidates.empty()) return;

  std::set<FrameId> window(recent_.begin(), recent_.end());
  window.insert(keyframes_.begin(), keyframes_.end());
  window.insert(f);
  std::map<LandmarkId, std::vector<RayObs>> by_tag;
  for (FrameId w : window) {
    for (const auto& k : frames_.at(w).keypoints) {
      if (candidates.contains(k.landmark)) by_tag[k.landmark].push_back({w, k.cam, k.uv});
    }
  }

  const FrontendConfig& fc = cfg_.frontend;
  const Mat2 W = observation_information();
  for (auto& [tag, obs] : by_tag) {
    while (obs.size() >= 2) {
      std::vector<Ray> rays;
      for (const auto& o : obs) {
        const Pose T_WC = graph_.states.at(o.frame).x.pose() * graph_.rig.T_SC[o.cam];
        rays.push_back({T_WC, graph_.rig.cameras[o.cam].backproject(o.uv)});
      }
      const auto p = intersect_rays(rays);
      if (!p) break;
      double worst = -1.0;
      std::size_t worst_i = 0;
      for (std::size_t i = 0; i < obs.size(); ++i) {
        const Vec3 p_C = point_in_camera(graph_.rig, obs[i].cam,
                                         graph_.states.at(obs[i].frame).x.pose(), *p);
        const auto pr = graph_.rig.cameras[obs[i].cam].project(p_C);
        double err = std::numeric_limits<double>::infinity();
        if (pr && p_C.z() > fc.min_depth && p_C.z() < fc.max_depth) err = (pr->uv - obs[i].uv).norm();
        if (err > worst) {
          worst = err;
          worst_i = i;
        }
      }
      if (worst <= fc.triangulation_max_error_px) {
        const LandmarkId id = index_.allocate();
        graph_.landmarks[id] = LandmarkVariable{*p, tag, false};
        index_.by_tag[tag] = id;
        for (const auto& o : obs) graph_.observations.push_back({o.frame, id, o.cam, o.uv, W});
        break;
      }
      obs.erase(obs.begin() + static_cast<std::ptrdiff_t>(worst_i));
    }
  }
}

int Estimator::covisibility(FrameId a, FrameId b) const {
  return covis_in(landmarks_by_frame(graph_), a, b);
}

void Estimator::maintain_window(FrameId live, FrameId current_keyframe) {
  while (static_cast<int>(recent_.size()) > cfg_.window.recent) {
    const FrameId f = recent_.front();
    recent_.pop_front();
    if (frames_.at(f).keyframe) {
      keyframes_.insert(f);
      frames_.at(f).set = FrameSet::kKeyframe;
    } else {
      drop_frame(f);
    }
  }
  if (static_cast<int>(keyframes_.size()) <= cfg_.window.max_keyframes) return;

  const auto by_frame = landmarks_by_frame(graph_);
  const FrameId oldest = *keyframes_.begin();
  const bool keep_oldest = covis_in(by_frame, oldest, live) > 0;
  FrameId demoted = -1;
  int best_score = 0;
  for (FrameId k : keyframes_) {
    if (k == oldest && keep_oldest) continue;
    int score = covis_in(by_frame, k, live);
    if (current_keyframe >= 0) score = std::max(score, covis_in(by_frame, k, current_keyframe));
    if (demoted < 0 || score < best_score) {
      demoted = k;
      best_score = score;
    }
  }
  if (demoted >= 0) demote(demoted);
}

void Estimator::drop_frame(FrameId f) {
  auto& imu = graph_.imu_factors;
  const auto in = std::find_if(imu.begin(), imu.end(), [&](const auto& p) { return p.frame_n == f; });
  const auto out = std::find_if(imu.begin(), imu.end(), [&](const auto& p) { return p.frame_k == f; });
  if (in == imu.end() || out == imu.end()) {
    throw std::logic_error("dropped frame must sit inside the IMU chain");
  }
  const FrameId anchor = in->frame_k;
  dropped_[f] = Dropped{graph_.states.at(f).t, anchor,
                        graph_.states.at(anchor).x.pose().inverse() * graph_.states.at(f).x.pose()};
  in->append(out->samples(), graph_.imu);
  in->frame_n = out->frame_n;
  imu.erase(out);

  std::erase_if(graph_.observations, [&](const auto& o) { return o.frame == f; });
  std::erase_if(graph_.priors, [&](const auto& p) { return p.frame == f; });
  graph_.states.erase(f);
  frames_.erase(f);
  remove_orphans();
}

void Estimator::demote(FrameId r) {
  keyframes_.erase(r);
  FrameEntry& e = frames_.at(r);
  e.set = FrameSet::kPosegraph;
  e.keypoints.clear();
  e.keypoints.shrink_to_fit();
  create_posegraph_edges(r);
}

std::vector<FrameId> Estimator::create_posegraph_edges(FrameId r) {
  const auto by_frame = landmarks_by_frame(graph_);
  std::set<FrameId> with_edges;
  for (const auto& f : graph_.two_pose) {
    with_edges.insert(f.ref);
    with_edges.insert(f.other);
  }
  std::set<FrameId> nodes{r};
  FrameId best = -1;
  int best_covis = 0;
  for (const auto& [f, lms] : by_frame) {
    // non-keyframes get dropped later, so they cannot carry edges
    if (f == r || !frames_.at(f).keyframe) continue;
    if (with_edges.contains(f)) nodes.insert(f);
    const int c = covis_in(by_frame, r, f);
    if (c > best_covis) {
      best_covis = c;
      best = f;
    }
  }
  if (best >= 0) nodes.insert(best);

  const std::vector<FrameId> node_list(nodes.begin(), nodes.end());
  std::map<FramePair, int> weights;
  for (std::size_t i = 0; i < node_list.size(); ++i) {
    for (std::size_t j = i + 1; j < node_list.size(); ++j) {
      const int c = covis_in(by_frame, node_list[i], node_list[j]);
      if (c > 0) weights[{node_list[i], node_list[j]}] = c;
    }
  }

  std::map<LandmarkId, WorldLandmark> landmarks;
  if (by_frame.contains(r)) {
    for (LandmarkId id : by_frame.at(r)) {
      const auto& l = graph_.landmarks.at(id);
      landmarks[id] = WorldLandmark{l.p_W, l.tag};
    }
  }
  const Mat2 W = observation_information();
  std::vector<FrameId> connected;
  for (const auto& [a, b] : max_spanning_tree(node_list, weights)) {
    if (a != r && b != r) continue;
    const FrameId c = a == r ? b : a;
    TwoPoseFactor factor;
    try {
      factor = make_two_pose_factor(r, c, graph_.observations, landmarks,
                                    graph_.states.at(r).x.pose(), graph_.states.at(c).x.pose(),
                                    graph_.rig, W, cfg_.two_pose);
    } catch (const InsufficientObservations&) {
      continue;
    }
    std::set<std::tuple<FrameId, int, LandmarkId>> used;
    for (const auto& o : factor.observations) used.emplace(o.frame, o.cam, o.landmark);
    std::erase_if(graph_.observations, [&](const auto& o) {
      return used.contains({o.frame, o.cam, o.landmark});
    });
    graph_.two_pose.push_back(std::move(factor));
    connected.push_back(c);
  }
  std::erase_if(graph_.observations, [&](const auto& o) { return o.frame == r; });
  remove_orphans();
  return connected;
}

void Estimator::remove_orphans() {
  std::set<LandmarkId> used;
  for (const auto& o : graph_.observations) used.insert(o.landmark);
  for (auto it = graph_.landmarks.begin(); it != graph_.landmarks.end();) {
    if (used.contains(it->first)) {
      ++it;
      continue;
    }
    const auto tag = index_.by_tag.find(it->second.tag);
    if (tag != index_.by_tag.end() && tag->second == it->first) index_.by_tag.erase(tag);
    it = graph_.landmarks.erase(it);
  }
}

void Estimator::prune_loop_frames() {
  while (static_cast<int>(loop_frames_.size()) > cfg_.window.max_loop_frames) {
    const FrameId r = *loop_frames_.begin();
    loop_frames_.erase(loop_frames_.begin());
    create_posegraph_edges(r);
  }
}

void Estimator::update_fixation() {
  std::vector<double> times;
  for (const auto& [id, s] : graph_.states) times.push_back(s.t);
  const int A = variable_state_count(times, cfg_.window.a_min, cfg_.window.delta_t);
  const int n = static_cast<int>(graph_.states.size());
  int i = 0;
  for (auto& [id, s] : graph_.states) {
    const bool free = n - 1 - i < A && !loop_frames_.contains(id);
    s.pose_fixed = !free;
    s.speed_bias_fixed = !free;
    s.gauge_fixed = false;
    ++i;
  }
  auto& oldest = graph_.states.begin()->second;
  if (!oldest.pose_fixed) oldest.gauge_fixed = true;
  set_landmark_fixation(graph_);
}

void Estimator::run_optimizer(const SolverOptions& options) {
  const OptReport r = optimize(graph_, options);
  bool finite = std::isfinite(r.final_cost);
  for (const auto& [id, s] : graph_.states) {
    finite = finite && s.x.r.allFinite() && s.x.v.allFinite() && s.x.q.coeffs().allFinite();
  }
  if (r.diverged || !finite) {
    throw DivergenceError("optimization diverged at frame " + std::to_string(graph_.states.rbegin()->first));
  }
  relinearize_imu();
}

void Estimator::relinearize_imu() {
  for (auto& pre : graph_.imu_factors) {
    const StateVariable& k = graph_.states.at(pre.frame_k);
    const StateVariable& n = graph_.states.at(pre.frame_n);
    // a factor between fixed states is a constant
    if (k.pose_fixed && k.speed_bias_fixed && n.pose_fixed && n.speed_bias_fixed) continue;
    const NavState& x = k.x;
    if ((x.bg - pre.bg_lin()).norm() > cfg_.relinearize.bg ||
        (x.ba - pre.ba_lin()).norm() > cfg_.relinearize.ba) {
      pre = pre.relinearized(graph_.imu, x.bg, x.ba);
    }
  }
}

void Estimator::import_job(FrameId f) {
  if (!job_.active() || frame_count_ - job_.started_at() < cfg_.loop.import_delay_frames) return;
  job_.wait();
  const OptReport& r = job_.report();
  event({{"event", "job_done"},
         {"frame", f},
         {"loop_frame", job_.loop_frame()},
         {"iterations", r.iterations},
         {"initial_cost", r.initial_cost},
         {"final_cost", r.final_cost},
         {"diverged", r.diverged}});
  if (!r.diverged) {
    int shared = 0;
    for (const auto& [id, s] : job_.graph().states) shared += graph_.states.contains(id);
    import_result(graph_, job_.graph());
    event({{"event", "imported"}, {"frame", f}, {"loop_frame", job_.loop_frame()}, {"states", shared}});
    prune_loop_frames();
  }
  job_.clear();
  cooldown_until_ = frame_count_ + cfg_.loop.cooldown_frames;
}

void Estimator::loop_step(FrameId f) {
  if (job_.active() || frame_count_ < cooldown_until_) return;
  std::vector<KeyframeDescriptor> db;
  for (const auto& d : database_) {
    const auto it = frames_.find(d.id);
    if (it != frames_.end() && it->second.set == FrameSet::kPosegraph && !loop_frames_.contains(d.id)) {
      db.push_back(d);
    }
  }
  const auto c = recognize(graph_, f, frames_.at(f).keypoints, db, cfg_.loop, cfg_.frontend.pixel_sigma);
  if (!c) return;
  event({{"event", "loop_detected"},
         {"frame", f},
         {"match", c->match},
         {"shared", c->shared_tags.size()},
         {"verified", c->verified}});
  if (!c->verified) return;
  event({{"event", "loop_verified"},
         {"frame", f},
         {"match", c->match},
         {"inliers", c->inliers},
         {"correspondences", c->correspondences},
         {"correction_m", c->correction_m},
         {"correction_deg", c->correction_rad * 180.0 / M_PI}});

  // earlier loop frames go back to the posegraph while they still agree with
  // the window; the correction below moves the window's landmarks
  while (!loop_frames_.empty()) {
    const FrameId r = *loop_frames_.begin();
    loop_frames_.erase(loop_frames_.begin());
    create_posegraph_edges(r);
  }
  const RelocalizeResult rr = relocalize(graph_, *c, index_, observation_information());
  for (FrameId lf : rr.loop_frames) {
    const auto it = frames_.find(lf);
    if (it != frames_.end() && it->second.set == FrameSet::kPosegraph) loop_frames_.insert(lf);
  }
  prune_loop_frames();
  for (FrameId w : recent_) associate(w);
  for (FrameId w : keyframes_) associate(w);
  update_fixation();
  run_optimizer(cfg_.solver);

  SolverOptions options = cfg_.solver;
  options.max_iterations = cfg_.loop.job_iterations;
  const double t_loop = graph_.states.at(c->match).t;
  job_.start(graph_, t_loop, frame_count_, c->match, options);
  event({{"event", "job_started"}, {"frame", f}, {"loop_frame", c->match}, {"t_loop", t_loop}});
}

StampedPose Estimator::causal_pose() const {
  if (last_frame_ < 0) throw std::logic_error("no frame processed yet");
  return {last_t_, graph_.states.at(last_frame_).x.pose()};
}

Trajectory Estimator::finish() {
  if (mode_ == Mode::kSlam && !graph_.states.empty()) {
    if (job_.active()) {
      job_.wait();
      if (!job_.report().diverged) import_result(graph_, job_.graph());
      job_.clear();
    }
    // every archived measurement back in, as a full bundle adjustment
    revive_factors(graph_, index_, observation_information(),
                   [](const TwoPoseFactor&) { return true; });
    for (auto& [id, s] : graph_.states) {
      s.pose_fixed = false;
      s.speed_bias_fixed = false;
      s.gauge_fixed = false;
    }
    graph_.states.begin()->second.gauge_fixed = true;
    set_landmark_fixation(graph_);
    run_optimizer(cfg_.final_solver);
  }
  std::map<double, Pose> poses;
  for (const auto& [id, s] : graph_.states) poses[s.t] = s.x.pose();
  for (const auto& [id, d] : dropped_) {
    poses[d.t] = graph_.states.at(d.anchor).x.pose() * d.T_anchor_frame;
  }
  Trajectory out;
  for (const auto& [t, T] : poses) out.push_back({t, T});
  return out;
}

WindowStats Estimator::window_stats() const {
  WindowStats w;
  w.frame = last_frame_;
  w.recent = static_cast<int>(recent_.size());
  w.keyframes = static_cast<int>(keyframes_.size());
  w.loop = static_cast<int>(loop_frames_.size());
  w.states = static_cast<int>(graph_.states.size());
  for (const auto& [id, f] : frames_) w.posegraph += f.set == FrameSet::kPosegraph;
  std::vector<double> times;
  for (const auto& [id, s] : graph_.states) {
    times.push_back(s.t);
    w.variable_states += !s.pose_fixed;
  }
  w.a_min = cfg_.window.a_min;
  w.a_dt = times.empty() ? 0 : variable_state_count(times, 0, cfg_.window.delta_t);
  w.variable_limit = std::max(w.a_min, w.a_dt);
  return w;
}

}  // namespace vigraph
