#include "vigraph/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <Eigen/LU>

#include "json_util.hpp"

namespace vigraph {

namespace {

using jsonutil::fmt;
using nlohmann::json;

constexpr double kTwoPi = 2.0 * M_PI;

// quintic smoothstep and its first two integrals / derivatives
double smooth(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
}
double smooth_d(double x) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return 30.0 * x * x * (1.0 - x) * (1.0 - x);
}
double smooth_int(double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 0.5 + (x - 1.0);
  return x * x * x * x * (2.5 + x * (-3.0 + x));
}

struct PathPoint {
  Vec3 p, dp, ddp;  // derivatives w.r.t. the path parameter
};

/// Periodic C2 cubic spline through waypoints with unit parameter spacing.
class ClosedSpline {
 public:
  explicit ClosedSpline(const std::vector<Vec3>& pts) : pts_(pts) {
    const int n = static_cast<int>(pts.size());
    MatX A = MatX::Zero(n, n);
    MatX rhs(n, 3);
    for (int i = 0; i < n; ++i) {
      A(i, (i + n - 1) % n) += 1.0;
      A(i, i) += 4.0;
      A(i, (i + 1) % n) += 1.0;
      rhs.row(i) = 6.0 * (pts[(i + 1) % n] - 2.0 * pts[i] + pts[(i + n - 1) % n]).transpose();
    }
    M_ = A.partialPivLu().solve(rhs);
  }

  PathPoint at(double u) const {
    const int n = static_cast<int>(pts_.size());
    double w = std::fmod(u, static_cast<double>(n));
    if (w < 0) w += n;
    const int i = std::min(static_cast<int>(w), n - 1);
    const double s = w - i;
    const int j = (i + 1) % n;
    const Vec3 Mi = M_.row(i).transpose(), Mj = M_.row(j).transpose();
    const double r = 1.0 - s;
    PathPoint out;
    out.p = r * pts_[i] + s * pts_[j] + ((r * r * r - r) * Mi + (s * s * s - s) * Mj) / 6.0;
    out.dp = pts_[j] - pts_[i] + ((-3.0 * r * r + 1.0) * Mi + (3.0 * s * s - 1.0) * Mj) / 6.0;
    out.ddp = r * Mi + s * Mj;
    return out;
  }

 private:
  std::vector<Vec3> pts_;
  MatX M_;
};

PathPoint path_at(const TrajectorySpec& s, double u) {
  PathPoint out;
  switch (s.kind) {
    case TrajectoryKind::kRest:
      out.p = Vec3::Zero();
      out.dp = Vec3(1.0, 0.0, 0.0);  // heading only
      out.ddp = Vec3::Zero();
      return out;
    case TrajectoryKind::kCircle: {
      const double R = s.radius, h = s.height_amplitude;
      out.p = Vec3(R * std::cos(u), R * std::sin(u), h * std::sin(2.0 * u));
      out.dp = Vec3(-R * std::sin(u), R * std::cos(u), 2.0 * h * std::cos(2.0 * u));
      out.ddp = Vec3(-R * std::cos(u), -R * std::sin(u), -4.0 * h * std::sin(2.0 * u));
      return out;
    }
    case TrajectoryKind::kLissajous: {
      const Vec3& A = s.lissajous_amplitude;
      out.p = Vec3(A.x() * std::sin(u), A.y() * std::sin(2.0 * u), A.z() * std::sin(3.0 * u));
      out.dp = Vec3(A.x() * std::cos(u), 2.0 * A.y() * std::cos(2.0 * u),
                    3.0 * A.z() * std::cos(3.0 * u));
      out.ddp = Vec3(-A.x() * std::sin(u), -4.0 * A.y() * std::sin(2.0 * u),
                     -9.0 * A.z() * std::sin(3.0 * u));
      return out;
    }
    case TrajectoryKind::kWaypointSpline:
      return ClosedSpline(s.waypoints).at(u);
  }
  return out;
}

/// Path parameter length of one cycle.
double cycle_length(const TrajectorySpec& s) {
  if (s.kind == TrajectoryKind::kWaypointSpline) {
    return static_cast<double>(s.waypoints.size());
  }
  return kTwoPi;
}

double first_frame_index(const TrajectorySpec& s) {
  const double step = s.imu_rate / s.frame_rate;
  return std::ceil(20.0 / step) * step;  // leaves >= 20 samples before it
}

}  // namespace

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::kRest:
      return "rest";
    case TrajectoryKind::kCircle:
      return "circle";
    case TrajectoryKind::kLissajous:
      return "lissajous";
    case TrajectoryKind::kWaypointSpline:
      return "waypoint-spline";
  }
  return "circle";
}

TrajectoryKind trajectory_from_string(const std::string& name) {
  if (name == "rest") return TrajectoryKind::kRest;
  if (name == "circle") return TrajectoryKind::kCircle;
  if (name == "lissajous") return TrajectoryKind::kLissajous;
  if (name == "waypoint-spline" || name == "spline") return TrajectoryKind::kWaypointSpline;
  throw std::invalid_argument("unknown trajectory kind: " + name);
}

void TrajectorySpec::validate() const {
  if (!(duration > 0 && frame_rate > 0 && imu_rate > 0 && period > 0 && ramp > 0 &&
        preamble >= 0)) {
    throw std::invalid_argument("trajectory: durations and rates must be positive");
  }
  const double ratio = imu_rate / frame_rate;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0) {
    throw std::invalid_argument("trajectory: imu_rate must be a multiple of frame_rate");
  }
  if (kind == TrajectoryKind::kCircle && !(radius > 0)) {
    throw std::invalid_argument("trajectory: radius must be positive");
  }
  if (kind == TrajectoryKind::kWaypointSpline && waypoints.size() < 3) {
    throw std::invalid_argument("trajectory: spline needs at least 3 waypoints");
  }
  if (first_frame_index(*this) / imu_rate >= duration) {
    throw std::invalid_argument("trajectory: too short for a single frame");
  }
}

NoiseSpec NoiseSpec::none() {
  NoiseSpec n;
  n.pixel_sigma = 0.0;
  n.outlier_fraction = 0.0;
  n.imu_noise = false;
  n.bias_walk = false;
  n.gyro_bias.setZero();
  n.accel_bias.setZero();
  return n;
}

void SimSpec::validate() const {
  trajectory.validate();
  imu.validate();
  rig.validate();
  if (landmarks.count <= 0 || !(landmarks.outer_radius > landmarks.inner_radius) ||
      !(landmarks.inner_radius >= 0) || !(landmarks.z_max > landmarks.z_min)) {
    throw std::invalid_argument("landmarks: invalid field");
  }
  if (!(noise.pixel_sigma >= 0) || !(noise.outlier_fraction >= 0) ||
      !(noise.outlier_fraction < 1)) {
    throw std::invalid_argument("noise: invalid values");
  }
}

Kinematics trajectory_at(const TrajectorySpec& s, double t) {
  const double rate = cycle_length(s) / s.period;  // nominal du/dt
  const double tau = (t - s.preamble) / s.ramp;
  const double u = rate * s.ramp * smooth_int(tau);
  const double du = rate * smooth(tau);
  const double ddu = rate * smooth_d(tau) / s.ramp;

  const PathPoint pp = path_at(s, u);
  Kinematics k;
  k.p = pp.p;
  k.v = pp.dp * du;
  k.a = pp.ddp * du * du + pp.dp * ddu;
  if (s.kind == TrajectoryKind::kRest) {
    k.v.setZero();
    k.a.setZero();
  }

  // heading along the path tangent
  const double tx = pp.dp.x(), ty = pp.dp.y();
  const double heading = std::atan2(ty, tx);
  const double dheading_du = (tx * pp.ddp.y() - ty * pp.ddp.x()) / (tx * tx + ty * ty);
  double yaw = heading;
  double dyaw = dheading_du * du;
  double pitch = 0.0, dpitch = 0.0, roll = 0.0, droll = 0.0;
  if (s.kind != TrajectoryKind::kRest) {
    // dithers fade in with the speed ramp
    const double env = smooth(tau);
    const double denv = smooth_d(tau) / s.ramp;
    const double w = kTwoPi * s.dither_frequency;
    const double tt = t - s.preamble;
    auto dither = [&](double amp, double wf, double phase, double& val, double& rate_out) {
      const double sn = std::sin(wf * tt + phase), cs = std::cos(wf * tt + phase);
      val = amp * env * sn;
      rate_out = amp * (denv * sn + env * wf * cs);
    };
    double v, dv;
    dither(s.yaw_dither, w, 0.0, v, dv);
    yaw += v;
    dyaw += dv;
    dither(s.pitch_dither, 1.3 * w, 1.0, pitch, dpitch);
    dither(s.roll_dither, 0.7 * w, 2.0, roll, droll);
  }
  k.q = quat_from_euler_zyx(yaw, pitch, roll);
  const Mat3 Rz = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
  const Mat3 Ry = Eigen::AngleAxisd(pitch, Vec3::UnitY()).toRotationMatrix();
  const Vec3 omega_W = dyaw * Vec3::UnitZ() + dpitch * (Rz * Vec3::UnitY()) +
                       droll * (Rz * Ry * Vec3::UnitX());
  k.omega_B = k.q.toRotationMatrix().transpose() * omega_W;
  return k;
}

const GtState& SimDataset::gt_at(double t) const {
  auto it = std::lower_bound(gt.begin(), gt.end(), t,
                             [](const GtState& s, double x) { return s.t < x; });
  if (it == gt.end()) return gt.back();
  if (it != gt.begin() && std::abs((it - 1)->t - t) < std::abs(it->t - t)) return *(it - 1);
  return *it;
}

SimDataset generate(const SimSpec& spec, std::uint64_t seed) {
  spec.validate();
  SimDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  const TrajectorySpec& tr = spec.trajectory;
  const NoiseSpec& nz = spec.noise;

  // independent streams so that e.g. the outlier rate does not change the IMU noise
  std::mt19937_64 rng_landmarks(seed * 4 + 0);
  std::mt19937_64 rng_imu(seed * 4 + 1);
  std::mt19937_64 rng_pixels(seed * 4 + 2);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const LandmarkFieldSpec& lf = spec.landmarks;
  for (int j = 0; j < lf.count; ++j) {
    const double r2 = lf.inner_radius * lf.inner_radius +
                      uni(rng_landmarks) * (lf.outer_radius * lf.outer_radius -
                                            lf.inner_radius * lf.inner_radius);
    const double phi = kTwoPi * uni(rng_landmarks);
    const double z = lf.z_min + (lf.z_max - lf.z_min) * uni(rng_landmarks);
    ds.landmarks[j] = lf.center + Vec3(std::sqrt(r2) * std::cos(phi), std::sqrt(r2) * std::sin(phi), z);
  }

  const ImuParams& ip = spec.imu;
  const long n_samples = static_cast<long>(std::floor(tr.duration * tr.imu_rate + 1e-9)) + 1;
  const double dt = 1.0 / tr.imu_rate;
  const Vec3 g_W = ip.gravity();
  Vec3 bg = nz.gyro_bias, ba = nz.accel_bias;
  for (long i = 0; i < n_samples; ++i) {
    const double t = static_cast<double>(i) / tr.imu_rate;
    if (i > 0 && nz.bias_walk) {
      const double sw = std::sqrt(dt);
      bg += ip.sigma_bg * sw * Vec3(gauss(rng_imu), gauss(rng_imu), gauss(rng_imu));
      ba += ip.sigma_ba * sw * Vec3(gauss(rng_imu), gauss(rng_imu), gauss(rng_imu));
    }
    const Kinematics k = trajectory_at(tr, t);
    const Mat3 R_T = k.q.toRotationMatrix().transpose();
    ImuSample s;
    s.t = t;
    s.gyro = k.omega_B + bg;
    s.accel = R_T * (k.a - g_W) + ba;
    if (nz.imu_noise) {
      const double sq = std::sqrt(tr.imu_rate);
      s.gyro += ip.sigma_g * sq * Vec3(gauss(rng_imu), gauss(rng_imu), gauss(rng_imu));
      s.accel += ip.sigma_a * sq * Vec3(gauss(rng_imu), gauss(rng_imu), gauss(rng_imu));
    }
    ds.imu.push_back(s);
    GtState gs;
    gs.t = t;
    gs.x.r = k.p;
    gs.x.q = canonical(k.q);
    gs.x.v = k.v;
    gs.x.bg = bg;
    gs.x.ba = ba;
    ds.gt.push_back(gs);
  }

  const long step = std::lround(tr.imu_rate / tr.frame_rate);
  FrameId id = 0;
  for (long i = std::lround(first_frame_index(tr)); i < n_samples; i += step) {
    SimFrame f;
    f.id = id++;
    f.t = ds.gt[i].t;
    const Pose T_WS = ds.gt[i].x.pose();
    for (const auto& [lid, l] : ds.landmarks) {
      for (int cam = 0; cam < spec.rig.size(); ++cam) {
        const CameraModel& model = spec.rig.cameras[cam];
        const auto pr = model.project(point_in_camera(spec.rig, cam, T_WS, l));
        if (!pr || !model.inside(pr->uv)) continue;
        // always draw the same numbers per measurement
        const Vec2 noise(gauss(rng_pixels), gauss(rng_pixels));
        const double coin = uni(rng_pixels);
        const Vec2 random_px(uni(rng_pixels) * model.width, uni(rng_pixels) * model.height);
        SimObservation o;
        o.landmark = lid;
        o.cam = cam;
        o.outlier = coin < nz.outlier_fraction;
        o.uv = o.outlier ? random_px : Vec2(pr->uv + nz.pixel_sigma * noise);
        f.observations.push_back(o);
      }
    }
    if (static_cast<int>(f.observations.size()) < lf.min_observations) {
      throw DatasetError("frame " + std::to_string(f.id) + " at t=" + fmt(f.t) + " sees only " +
                         std::to_string(f.observations.size()) + " landmarks");
    }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

double integrate_check(const SimDataset& ds) {
  if (ds.gt.empty()) return 0.0;
  const Vec3 g = ds.spec.imu.gravity();
  NavState x = ds.gt.front().x;
  Mat3 R = x.q.toRotationMatrix();
  double worst = 0.0;
  for (std::size_t i = 0; i + 1 < ds.imu.size(); ++i) {
    const ImuSample& s0 = ds.imu[i];
    const ImuSample& s1 = ds.imu[i + 1];
    const double h = s1.t - s0.t;
    const Vec3 bg = ds.gt[i].x.bg, ba = ds.gt[i].x.ba;
    const Vec3 w = 0.5 * (s0.gyro + s1.gyro) - bg;
    const Mat3 R1 = R * quat_exp(w * h).toRotationMatrix();
    const Vec3 a = 0.5 * (R * (s0.accel - ba) + R1 * (s1.accel - ba)) + g;
    x.r += x.v * h + 0.5 * a * h * h;
    x.v += a * h;
    R = R1;
    worst = std::max(worst, (x.r - ds.gt[i + 1].x.r).norm());
  }
  return worst;
}

// ---------------------------------------------------------------------------
// serialization

json rig_to_json(const CameraRig& rig) {
  json cams = json::array();
  for (const auto& c : rig.cameras) {
    cams.push_back({{"fu", c.fu},
                    {"fv", c.fv},
                    {"cu", c.cu},
                    {"cv", c.cv},
                    {"width", c.width},
                    {"height", c.height},
                    {"distortion",
                     {{"type", to_string(c.distortion.type)}, {"k", c.distortion.k}}}});
  }
  json ext = json::array();
  for (const auto& T : rig.T_SC) {
    ext.push_back({{"r", jsonutil::vec3(T.r)}, {"q", {T.q.w(), T.q.x(), T.q.y(), T.q.z()}}});
  }
  return {{"cameras", cams}, {"T_SC", ext}};
}

CameraRig rig_from_json(const json& j) {
  if (!j.is_object() || !j.contains("cameras") || !j.contains("T_SC") ||
      !j.at("cameras").is_array() || !j.at("T_SC").is_array()) {
    throw std::invalid_argument("rig needs 'cameras' and 'T_SC' arrays");
  }
  CameraRig rig;
  for (const auto& c : j.at("cameras")) {
    CameraModel m;
    jsonutil::read(c, "fu", m.fu);
    jsonutil::read(c, "fv", m.fv);
    jsonutil::read(c, "cu", m.cu);
    jsonutil::read(c, "cv", m.cv);
    jsonutil::read(c, "width", m.width);
    jsonutil::read(c, "height", m.height);
    if (c.contains("distortion")) {
      const json& d = c.at("distortion");
      std::string type = "none";
      jsonutil::read(d, "type", type);
      m.distortion.type = distortion_from_string(type);
      jsonutil::read(d, "k", m.distortion.k);
    }
    if (!(m.fu > 0 && m.fv > 0 && m.width > 0 && m.height > 0)) {
      throw std::invalid_argument("camera intrinsics must be positive");
    }
    rig.cameras.push_back(m);
  }
  for (const auto& e : j.at("T_SC")) {
    if (!e.contains("r") || !e.contains("q") || !e.at("q").is_array() || e.at("q").size() != 4) {
      throw std::invalid_argument("extrinsic needs 'r' [3] and 'q' [w,x,y,z]");
    }
    const auto& q = e.at("q");
    const Quat qq(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>());
    if (std::abs(qq.norm() - 1.0) > 1e-6) throw std::invalid_argument("extrinsic quaternion not unit");
    rig.T_SC.emplace_back(jsonutil::to_vec3(e.at("r"), "r"), qq.normalized());
  }
  rig.validate();
  return rig;
}

json imu_to_json(const ImuParams& p) {
  return {{"sigma_g", p.sigma_g},   {"sigma_a", p.sigma_a}, {"sigma_bg", p.sigma_bg},
          {"sigma_ba", p.sigma_ba}, {"g", p.g},             {"rate", p.rate}};
}

ImuParams imu_from_json(const json& j, ImuParams p) {
  jsonutil::read(j, "sigma_g", p.sigma_g);
  jsonutil::read(j, "sigma_a", p.sigma_a);
  jsonutil::read(j, "sigma_bg", p.sigma_bg);
  jsonutil::read(j, "sigma_ba", p.sigma_ba);
  jsonutil::read(j, "g", p.g);
  jsonutil::read(j, "rate", p.rate);
  p.validate();
  return p;
}

json to_json(const SimSpec& s) {
  const TrajectorySpec& t = s.trajectory;
  json wps = json::array();
  for (const auto& w : t.waypoints) wps.push_back(jsonutil::vec3(w));
  json out;
  out["trajectory"] = {{"kind", to_string(t.kind)},
                       {"duration", t.duration},
                       {"frame_rate", t.frame_rate},
                       {"imu_rate", t.imu_rate},
                       {"preamble", t.preamble},
                       {"ramp", t.ramp},
                       {"period", t.period},
                       {"radius", t.radius},
                       {"height_amplitude", t.height_amplitude},
                       {"lissajous_amplitude", jsonutil::vec3(t.lissajous_amplitude)},
                       {"waypoints", wps},
                       {"yaw_dither", t.yaw_dither},
                       {"pitch_dither", t.pitch_dither},
                       {"roll_dither", t.roll_dither},
                       {"dither_frequency", t.dither_frequency}};
  const LandmarkFieldSpec& l = s.landmarks;
  out["landmarks"] = {{"count", l.count},
                      {"center", jsonutil::vec3(l.center)},
                      {"inner_radius", l.inner_radius},
                      {"outer_radius", l.outer_radius},
                      {"z_min", l.z_min},
                      {"z_max", l.z_max},
                      {"min_observations", l.min_observations}};
  const NoiseSpec& n = s.noise;
  out["noise"] = {{"pixel_sigma", n.pixel_sigma},
                  {"outlier_fraction", n.outlier_fraction},
                  {"imu_noise", n.imu_noise},
                  {"bias_walk", n.bias_walk},
                  {"gyro_bias", jsonutil::vec3(n.gyro_bias)},
                  {"accel_bias", jsonutil::vec3(n.accel_bias)}};
  out["imu"] = imu_to_json(s.imu);
  out["rig"] = rig_to_json(s.rig);
  return out;
}

SimSpec sim_spec_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("simulation spec must be a JSON object");
  SimSpec s;
  const json t = jsonutil::object_or_empty(j, "trajectory");
  TrajectorySpec& tr = s.trajectory;
  if (t.contains("kind")) {
    std::string kind;
    jsonutil::read(t, "kind", kind);
    tr.kind = trajectory_from_string(kind);
  }
  jsonutil::read(t, "duration", tr.duration);
  jsonutil::read(t, "frame_rate", tr.frame_rate);
  jsonutil::read(t, "imu_rate", tr.imu_rate);
  jsonutil::read(t, "preamble", tr.preamble);
  jsonutil::read(t, "ramp", tr.ramp);
  jsonutil::read(t, "period", tr.period);
  jsonutil::read(t, "radius", tr.radius);
  jsonutil::read(t, "height_amplitude", tr.height_amplitude);
  jsonutil::read_vec3(t, "lissajous_amplitude", tr.lissajous_amplitude);
  if (t.contains("waypoints")) {
    if (!t.at("waypoints").is_array()) throw std::invalid_argument("waypoints must be an array");
    for (const auto& w : t.at("waypoints")) tr.waypoints.push_back(jsonutil::to_vec3(w, "waypoint"));
  }
  jsonutil::read(t, "yaw_dither", tr.yaw_dither);
  jsonutil::read(t, "pitch_dither", tr.pitch_dither);
  jsonutil::read(t, "roll_dither", tr.roll_dither);
  jsonutil::read(t, "dither_frequency", tr.dither_frequency);

  const json l = jsonutil::object_or_empty(j, "landmarks");
  jsonutil::read(l, "count", s.landmarks.count);
  jsonutil::read_vec3(l, "center", s.landmarks.center);
  jsonutil::read(l, "inner_radius", s.landmarks.inner_radius);
  jsonutil::read(l, "outer_radius", s.landmarks.outer_radius);
  jsonutil::read(l, "z_min", s.landmarks.z_min);
  jsonutil::read(l, "z_max", s.landmarks.z_max);
  jsonutil::read(l, "min_observations", s.landmarks.min_observations);

  const json n = jsonutil::object_or_empty(j, "noise");
  jsonutil::read(n, "pixel_sigma", s.noise.pixel_sigma);
  jsonutil::read(n, "outlier_fraction", s.noise.outlier_fraction);
  jsonutil::read(n, "imu_noise", s.noise.imu_noise);
  jsonutil::read(n, "bias_walk", s.noise.bias_walk);
  jsonutil::read_vec3(n, "gyro_bias", s.noise.gyro_bias);
  jsonutil::read_vec3(n, "accel_bias", s.noise.accel_bias);

  if (j.contains("imu")) s.imu = imu_from_json(j.at("imu"));
  if (j.contains("rig")) s.rig = rig_from_json(j.at("rig"));
  s.imu.rate = tr.imu_rate;
  s.validate();
  return s;
}

namespace {

std::vector<std::vector<double>> read_csv(const std::filesystem::path& file,
                                          std::size_t columns) {
  std::ifstream in(file);
  if (!in) throw DatasetError("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(file.string() + " is empty");
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        throw DatasetError(file.string() + ":" + std::to_string(line_no) + ": not a number");
      }
      row.push_back(v);
    }
    if (row.size() != columns) {
      throw DatasetError(file.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(columns) + " columns");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_row(std::ofstream& out, std::initializer_list<double> values) {
  bool first = true;
  for (double v : values) {
    if (!first) out << ',';
    out << fmt(v);
    first = false;
  }
  out << '\n';
}

}  // namespace

void write_dataset(const SimDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "gt.csv");
    out << "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz\n";
    for (const auto& s : ds.gt) {
      const NavState& x = s.x;
      write_row(out, {s.t, x.r.x(), x.r.y(), x.r.z(), x.q.w(), x.q.x(), x.q.y(), x.q.z(),
                      x.v.x(), x.v.y(), x.v.z(), x.bg.x(), x.bg.y(), x.bg.z(), x.ba.x(),
                      x.ba.y(), x.ba.z()});
    }
  }
  {
    std::ofstream out(dir / "imu.csv");
    out << "t,gx,gy,gz,ax,ay,az\n";
    for (const auto& s : ds.imu) {
      write_row(out, {s.t, s.gyro.x(), s.gyro.y(), s.gyro.z(), s.accel.x(), s.accel.y(),
                      s.accel.z()});
    }
  }
  {
    std::ofstream out(dir / "landmarks.csv");
    out << "id,x,y,z\n";
    for (const auto& [id, l] : ds.landmarks) {
      write_row(out, {static_cast<double>(id), l.x(), l.y(), l.z()});
    }
  }
  {
    std::ofstream out(dir / "frames.jsonl");
    const int n_cams = ds.spec.rig.size();
    for (const auto& f : ds.frames) {
      out << "{\"frame_id\":" << f.id << ",\"t\":" << fmt(f.t) << ",\"cameras\":[";
      for (int cam = 0; cam < n_cams; ++cam) {
        if (cam) out << ',';
        out << '[';
        bool first = true;
        for (const auto& o : f.observations) {
          if (o.cam != cam) continue;
          if (!first) out << ',';
          first = false;
          out << "{\"landmark\":" << o.landmark << ",\"u\":" << fmt(o.uv.x())
              << ",\"v\":" << fmt(o.uv.y()) << ",\"outlier\":" << (o.outlier ? "true" : "false")
              << '}';
        }
        out << ']';
      }
      out << "]}\n";
    }
  }
  {
    json cfg = to_json(ds.spec);
    cfg["seed"] = ds.seed;
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2) << '\n';
  }
}

SimDataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw DatasetError("dataset directory not found: " + dir.string());
  }
  SimDataset ds;
  {
    std::ifstream in(dir / "config.json");
    if (!in) throw DatasetError("missing config.json in " + dir.string());
    try {
      const json cfg = json::parse(in);
      ds.spec = sim_spec_from_json(cfg);
      if (cfg.contains("seed")) ds.seed = cfg.at("seed").get<std::uint64_t>();
    } catch (const std::exception& e) {
      throw DatasetError(std::string("config.json: ") + e.what());
    }
  }
  for (const auto& r : read_csv(dir / "gt.csv", 17)) {
    GtState s;
    s.t = r[0];
    s.x.r = Vec3(r[1], r[2], r[3]);
    s.x.q = canonical(Quat(r[4], r[5], r[6], r[7]));
    s.x.v = Vec3(r[8], r[9], r[10]);
    s.x.bg = Vec3(r[11], r[12], r[13]);
    s.x.ba = Vec3(r[14], r[15], r[16]);
    ds.gt.push_back(s);
  }
  for (const auto& r : read_csv(dir / "imu.csv", 7)) {
    ds.imu.push_back({r[0], Vec3(r[1], r[2], r[3]), Vec3(r[4], r[5], r[6])});
  }
  for (std::size_t i = 1; i < ds.imu.size(); ++i) {
    if (!(ds.imu[i].t > ds.imu[i - 1].t)) throw DatasetError("imu.csv: timestamps not increasing");
  }
  for (const auto& r : read_csv(dir / "landmarks.csv", 4)) {
    ds.landmarks[static_cast<LandmarkId>(r[0])] = Vec3(r[1], r[2], r[3]);
  }
  std::ifstream in(dir / "frames.jsonl");
  if (!in) throw DatasetError("missing frames.jsonl in " + dir.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SimFrame f;
      f.id = j.at("frame_id").get<FrameId>();
      f.t = j.at("t").get<double>();
      const auto& cams = j.at("cameras");
      for (std::size_t cam = 0; cam < cams.size(); ++cam) {
        for (const auto& o : cams[cam]) {
          SimObservation so;
          so.landmark = o.at("landmark").get<LandmarkId>();
          so.cam = static_cast<int>(cam);
          so.uv = Vec2(o.at("u").get<double>(), o.at("v").get<double>());
          if (o.contains("outlier")) so.outlier = o.at("outlier").get<bool>();
          f.observations.push_back(so);
        }
      }
      if (!ds.frames.empty() && !(f.t > ds.frames.back().t)) {
        throw DatasetError("frame timestamps not increasing");
      }
      ds.frames.push_back(std::move(f));
    } catch (const json::exception& e) {
      throw DatasetError("frames.jsonl:" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (ds.imu.empty() || ds.frames.empty()) throw DatasetError("dataset has no imu samples or frames");
  return ds;
}

}  // namespace vigraph
