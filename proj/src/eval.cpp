#include "vigraph/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json_util.hpp"

namespace vigraph {

using jsonutil::fmt;
using nlohmann::json;

namespace {

void check_increasing(const Trajectory& traj, const std::filesystem::path& file) {
  for (std::size_t i = 1; i < traj.size(); ++i) {
    if (!(traj[i].t > traj[i - 1].t)) {
      throw std::runtime_error(file.string() + ": timestamps not strictly increasing");
    }
  }
}

}  // namespace

std::string tum_line(const StampedPose& p) {
  const Quat& q = p.T.q;
  std::string out = fmt(p.t);
  for (double v : {p.T.r.x(), p.T.r.y(), p.T.r.z(), q.x(), q.y(), q.z(), q.w()}) {
    out += ' ';
    out += fmt(v);
  }
  return out;
}

void write_tum(const Trajectory& traj, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto& p : traj) out << tum_line(p) << '\n';
}

Trajectory read_tum(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  Trajectory out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (double& x : v) {
      if (!(ss >> x)) {
        throw std::runtime_error(file.string() + ":" + std::to_string(line_no) +
                                 ": expected 8 numbers");
      }
    }
    const Quat q(v[7], v[4], v[5], v[6]);
    if (!(q.norm() > 0.5)) {
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": bad quaternion");
    }
    // keep written unit quaternions bit-exact
    const Quat qn = std::abs(q.norm() - 1.0) > 1e-12 ? q.normalized() : q;
    out.push_back({v[0], Pose(Vec3(v[1], v[2], v[3]), qn)});
  }
  check_increasing(out, file);
  return out;
}

Trajectory read_trajectory(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::string header;
  std::getline(in, header);
  if (header.rfind("t,px,py,pz,qw,qx,qy,qz", 0) != 0) return read_tum(file);
  Trajectory out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (row.size() < 8) throw std::runtime_error(file.string() + ": short row");
    out.push_back({row[0], Pose(Vec3(row[1], row[2], row[3]),
                                Quat(row[4], row[5], row[6], row[7]).normalized())});
  }
  check_increasing(out, file);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est,
                                                           const Trajectory& gt,
                                                           double max_dt) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = est[i].t;
    while (j + 1 < gt.size() && gt[j + 1].t <= t) ++j;
    std::size_t best = j;
    if (j + 1 < gt.size() && std::abs(gt[j + 1].t - t) < std::abs(gt[j].t - t)) best = j + 1;
    if (!gt.empty() && std::abs(gt[best].t - t) <= max_dt) out.emplace_back(i, best);
  }
  return out;
}

Pose YawAlignment::as_pose() const {
  return Pose(translation, Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ())));
}

YawAlignment align_yaw_position(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
  if (est.size() != gt.size() || est.size() < 2) {
    throw std::invalid_argument("alignment needs at least 2 associated pairs");
  }
  const double n = static_cast<double>(est.size());
  Vec3 ce = Vec3::Zero(), cg = Vec3::Zero();
  for (std::size_t i = 0; i < est.size(); ++i) {
    ce += est[i];
    cg += gt[i];
  }
  ce /= n;
  cg /= n;
  double s_cos = 0.0, s_sin = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const Vec3 a = est[i] - ce, b = gt[i] - cg;
    s_cos += a.x() * b.x() + a.y() * b.y();
    s_sin += a.x() * b.y() - a.y() * b.x();
  }
  YawAlignment out;
  out.yaw = (s_cos == 0.0 && s_sin == 0.0) ? 0.0 : std::atan2(s_sin, s_cos);
  out.translation = cg - Eigen::AngleAxisd(out.yaw, Vec3::UnitZ()) * ce;
  return out;
}

Stats compute_stats(std::vector<double> values) {
  Stats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0, sum2 = 0.0;
  for (double v : values) {
    sum += v;
    sum2 += v * v;
    s.max = std::max(s.max, v);
  }
  s.mean = sum / s.count;
  s.rmse = std::sqrt(sum2 / s.count);
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  s.median = values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
  return s;
}

AteReport compute_ate(const Trajectory& est, const Trajectory& gt, const std::string& mode,
                      double max_dt) {
  const auto pairs = associate(est, gt, max_dt);
  if (pairs.empty()) throw std::invalid_argument("no associated timestamps");
  std::vector<Vec3> pe, pg;
  for (const auto& [i, j] : pairs) {
    pe.push_back(est[i].T.r);
    pg.push_back(gt[j].T.r);
  }
  AteReport r;
  r.mode = mode;
  r.alignment = align_yaw_position(pe, pg);
  const Pose A = r.alignment.as_pose();
  std::vector<double> err;
  for (std::size_t k = 0; k < pe.size(); ++k) err.push_back((A.transform(pe[k]) - pg[k]).norm());
  r.position = compute_stats(std::move(err));
  return r;
}

std::vector<RpeBucket> compute_rpe(const Trajectory& est, const Trajectory& gt,
                                   const std::vector<double>& distances, double max_dt) {
  if (distances.empty()) throw std::invalid_argument("no RPE distances");
  std::vector<double> d = distances;
  std::sort(d.begin(), d.end());
  if (!(d.front() > 0)) throw std::invalid_argument("RPE distances must be positive");

  const auto pairs = associate(est, gt, max_dt);
  // path length along the associated ground-truth poses
  std::vector<double> s(pairs.size(), 0.0);
  for (std::size_t k = 1; k < pairs.size(); ++k) {
    s[k] = s[k - 1] + (gt[pairs[k].second].T.r - gt[pairs[k - 1].second].T.r).norm();
  }
  if (pairs.empty() || s.back() < d.front()) {
    throw std::invalid_argument("trajectory shorter than the smallest RPE distance");
  }
  std::vector<RpeBucket> out;
  for (double dist : d) {
    std::vector<double> te, re;
    std::size_t j = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      j = std::max(j, i);
      while (j < pairs.size() && s[j] - s[i] < dist) ++j;
      if (j == pairs.size()) break;
      const Pose dg = gt[pairs[i].second].T.inverse() * gt[pairs[j].second].T;
      const Pose de = est[pairs[i].first].T.inverse() * est[pairs[j].first].T;
      const Pose E = dg.inverse() * de;
      te.push_back(E.r.norm());
      re.push_back(quat_log(E.q).norm() * 180.0 / M_PI);
    }
    RpeBucket b;
    b.distance = dist;
    b.translation = compute_stats(std::move(te));
    b.rotation = compute_stats(std::move(re));
    out.push_back(b);
  }
  return out;
}

namespace {

json stats_json(const Stats& s) {
  return {{"count", s.count}, {"rmse", s.rmse}, {"mean", s.mean}, {"median", s.median},
          {"max", s.max}};
}

Stats stats_from(const json& j) {
  Stats s;
  s.count = j.at("count").get<std::size_t>();
  s.rmse = j.at("rmse").get<double>();
  s.mean = j.at("mean").get<double>();
  s.median = j.at("median").get<double>();
  s.max = j.at("max").get<double>();
  return s;
}

}  // namespace

json to_json(const EvalReport& r) {
  json rpe = json::array();
  for (const auto& b : r.rpe) {
    rpe.push_back({{"distance", b.distance},
                   {"translation", stats_json(b.translation)},
                   {"rotation_deg", stats_json(b.rotation)}});
  }
  return {{"mode", r.ate.mode},
          {"ate", stats_json(r.ate.position)},
          {"alignment",
           {{"yaw", r.ate.alignment.yaw}, {"translation", jsonutil::vec3(r.ate.alignment.translation)}}},
          {"rpe", rpe}};
}

EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  r.ate.mode = j.at("mode").get<std::string>();
  r.ate.position = stats_from(j.at("ate"));
  r.ate.alignment.yaw = j.at("alignment").at("yaw").get<double>();
  r.ate.alignment.translation = jsonutil::to_vec3(j.at("alignment").at("translation"), "translation");
  for (const auto& b : j.at("rpe")) {
    RpeBucket bucket;
    bucket.distance = b.at("distance").get<double>();
    bucket.translation = stats_from(b.at("translation"));
    bucket.rotation = stats_from(b.at("rotation_deg"));
    r.rpe.push_back(bucket);
  }
  return r;
}

std::string rpe_csv(const std::vector<RpeBucket>& buckets) {
  std::string out =
      "distance,count,trans_rmse,trans_mean,trans_median,trans_max,rot_rmse_deg,rot_mean_deg,"
      "rot_median_deg,rot_max_deg\n";
  for (const auto& b : buckets) {
    out += fmt(b.distance) + ',' + std::to_string(b.translation.count);
    for (double v : {b.translation.rmse, b.translation.mean, b.translation.median,
                     b.translation.max, b.rotation.rmse, b.rotation.mean, b.rotation.median,
                     b.rotation.max}) {
      out += ',' + fmt(v);
    }
    out += '\n';
  }
  return out;
}

}  // namespace vigraph
