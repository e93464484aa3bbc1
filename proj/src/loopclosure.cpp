#include "vigraph/loopclosure.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>
#include <stdexcept>

#include <Eigen/Cholesky>

namespace vigraph {

void LoopConfig::validate() const {
  if (n_recent < 1 || min_shared < 1 || min_inliers < 1 || !(min_inlier_ratio >= 0) ||
      !(min_inlier_ratio <= 1) || !(inlier_sigmas > 0) || !(max_correction_m > 0) ||
      !(max_correction_deg > 0) || job_iterations < 1 || import_delay_frames < 0 ||
      cooldown_frames < 0 || !(false_negative_rate >= 0) || !(false_negative_rate < 1)) {
    throw std::invalid_argument("loop closure: invalid configuration");
  }
}

std::vector<LandmarkId> sorted_tags(std::span<const SimObservation> keypoints) {
  std::vector<LandmarkId> tags;
  tags.reserve(keypoints.size());
  for (const auto& k : keypoints) tags.push_back(k.landmark);
  std::sort(tags.begin(), tags.end());
  tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
  return tags;
}

std::map<LandmarkId, Vec3> loop_landmarks(const FactorGraph& graph, FrameId l) {
  std::map<LandmarkId, Vec3> out;
  for (const auto& f : graph.two_pose) {
    if (f.consumed || !f.connects(l)) continue;
    std::set<LandmarkId> seen_from_l;
    for (const auto& o : f.observations) {
      if (o.frame == l) seen_from_l.insert(o.landmark);
    }
    const Pose T_WSr = graph.states.at(f.ref).x.pose();
    for (const auto& a : f.landmarks) {
      if (a.tag == kNoTag || !seen_from_l.contains(a.id)) continue;
      out.try_emplace(a.tag, T_WSr.transform(a.p_Sr));
    }
  }
  return out;
}

namespace {

struct Correspondence {
  int cam;
  Vec2 uv;
  Vec3 p_W;
};

/// Deterministic per-pair coin for the oracle's false negatives.
double pair_coin(std::uint64_t seed, FrameId a, FrameId b) {
  std::uint64_t x = seed ^ (static_cast<std::uint64_t>(a) * 0x9E3779B97F4A7C15ULL) ^
                    (static_cast<std::uint64_t>(b) * 0xC2B2AE3D27D4EB4FULL);
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/// Robust Gauss-Newton on the query pose from 3D-2D correspondences.
Pose refine_pose(const CameraRig& rig, Pose T, const std::vector<Correspondence>& corr,
                 double sigma) {
  const double b = 3.0;
  for (int it = 0; it < 15; ++it) {
    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    int used = 0;
    for (const auto& c : corr) {
      const auto r = reprojection_error(rig, c.cam, T, c.p_W.homogeneous(), c.uv);
      if (!r) continue;
      const double s = r->error.squaredNorm() / (sigma * sigma);
      const double w = cauchy_rho_prime(s, b) / (sigma * sigma);
      H.noalias() += w * r->J_pose.transpose() * r->J_pose;
      g.noalias() += w * r->J_pose.transpose() * r->error;
      ++used;
    }
    if (used < 3) break;
    const Vec6 d = -(H + 1e-9 * Mat6::Identity()).ldlt().solve(g);
    if (!d.allFinite()) break;
    T = T.box_plus(d);
    if (d.norm() < 1e-10) break;
  }
  return T;
}

}  // namespace

std::optional<LoopCandidate> recognize(const FactorGraph& graph, FrameId query,
                                       std::span<const SimObservation> keypoints,
                                       std::span<const KeyframeDescriptor> database,
                                       const LoopConfig& config, double pixel_sigma) {
  const std::vector<LandmarkId> tags = sorted_tags(keypoints);
  const KeyframeDescriptor* best = nullptr;
  std::vector<LandmarkId> best_shared;
  for (const auto& d : database) {
    if (d.id > query - config.n_recent || !graph.states.contains(d.id)) continue;
    std::vector<LandmarkId> shared;
    std::set_intersection(tags.begin(), tags.end(), d.tags.begin(), d.tags.end(),
                          std::back_inserter(shared));
    if (shared.size() > best_shared.size() ||
        (best && shared.size() == best_shared.size() && d.id < best->id)) {
      best = &d;
      best_shared = std::move(shared);
    }
  }
  if (!best || static_cast<int>(best_shared.size()) < config.min_shared) return std::nullopt;
  if (config.false_negative_rate > 0 &&
      pair_coin(config.seed, query, best->id) < config.false_negative_rate) {
    return std::nullopt;
  }

  LoopCandidate c;
  c.query = query;
  c.match = best->id;
  c.shared_tags = best_shared;

  const auto points = loop_landmarks(graph, c.match);
  std::vector<Correspondence> corr;
  for (const auto& k : keypoints) {
    const auto it = points.find(k.landmark);
    if (it != points.end()) corr.push_back({k.cam, k.uv, it->second});
  }
  c.correspondences = static_cast<int>(corr.size());
  const Pose T_est = graph.states.at(query).x.pose();
  c.T_WS_corrected = T_est;
  if (c.correspondences < config.min_inliers) return c;

  const Pose T = refine_pose(graph.rig, T_est, corr, pixel_sigma);
  const double gate = config.inlier_sigmas * pixel_sigma;
  for (const auto& k : corr) {
    const auto r = reprojection_error(graph.rig, k.cam, T, k.p_W.homogeneous(), k.uv);
    if (r && r->error.cwiseAbs().maxCoeff() <= gate) ++c.inliers;
  }
  c.inlier_ratio = static_cast<double>(c.inliers) / c.correspondences;
  c.T_WS_corrected = T;
  c.correction = T * T_est.inverse();
  c.correction_m = (T.r - T_est.r).norm();
  c.correction_rad = rotation_angle(T, T_est);
  c.verified = c.inliers >= config.min_inliers && c.inlier_ratio >= config.min_inlier_ratio &&
               c.correction_m <= config.max_correction_m &&
               c.correction_rad <= config.max_correction_deg * M_PI / 180.0;
  return c;
}

std::vector<Pose> distribute_loop_error(const std::vector<Pose>& chain, const Pose& target) {
  if (chain.size() < 2) throw std::invalid_argument("loop chain needs at least 2 poses");
  const std::size_t n = chain.size() - 1;
  const Vec3 phi = quat_log(canonical(target.q * chain.back().q.inverse()));
  if (phi.norm() >= M_PI - 1e-12) {
    throw std::invalid_argument("loop rotation discrepancy too large to split");
  }
  std::vector<Pose> out(chain.size());
  out[0] = chain[0];
  std::vector<Quat> dq(chain.size());
  for (std::size_t k = 0; k <= n; ++k) {
    dq[k] = quat_exp(phi * (static_cast<double>(k) / n));
  }
  // rotate each displacement with the correction at its start
  for (std::size_t k = 1; k <= n; ++k) {
    out[k].q = canonical(dq[k] * chain[k].q);
    out[k].r = out[k - 1].r + dq[k - 1] * (chain[k].r - chain[k - 1].r);
  }
  out[n].q = target.q;
  const Vec3 gap = target.r - out[n].r;
  for (std::size_t k = 1; k <= n; ++k) {
    out[k].r += gap * (static_cast<double>(k) / n);
  }
  out[n].r = target.r;
  return out;
}

namespace {

void move_state(StateVariable& s, const Pose& new_pose) {
  const Quat dq = new_pose.q * s.x.q.inverse();
  s.x.v = dq * s.x.v;
  s.x.set_pose(new_pose);
}

}  // namespace

Revival revive_factors(FactorGraph& graph, LandmarkIndex& index, const Mat2& W_obs,
                       const std::function<bool(const TwoPoseFactor&)>& which) {
  Revival result;
  std::set<std::tuple<FrameId, int, LandmarkId>> existing;
  for (const auto& o : graph.observations) existing.emplace(o.frame, o.cam, o.landmark);
  std::set<FrameId> frames;
  for (auto& f : graph.two_pose) {
    if (f.consumed || !which(f)) continue;
    const Revived rv = revive(f, graph.states.at(f.ref).x.pose(), W_obs);
    ++result.factors;
    std::map<LandmarkId, LandmarkId> remap;
    for (const auto& l : rv.landmarks) {
      LandmarkId id = l.tag == kNoTag ? -1 : index.find(l.tag);
      if (id >= 0) {
        ++result.merged_landmarks;
      } else {
        id = index.allocate();
        graph.landmarks[id] = LandmarkVariable{l.p_W, l.tag, false};
        if (l.tag != kNoTag) index.by_tag[l.tag] = id;
      }
      remap[l.id] = id;
    }
    for (ReprojectionFactor o : rv.observations) {
      o.landmark = remap.at(o.landmark);
      o.information = W_obs;
      if (!existing.emplace(o.frame, o.cam, o.landmark).second) continue;
      graph.observations.push_back(o);
      frames.insert(o.frame);
      ++result.observations;
    }
  }
  std::erase_if(graph.two_pose, [](const TwoPoseFactor& f) { return f.consumed; });
  result.frames.assign(frames.begin(), frames.end());
  return result;
}

RelocalizeResult relocalize(FactorGraph& graph, const LoopCandidate& candidate,
                            LandmarkIndex& index, const Mat2& W_obs) {
  if (!candidate.verified) throw std::invalid_argument("relocalize needs a verified candidate");
  const Pose& D = candidate.correction;
  RelocalizeResult result;

  // fixed states between the match and the active window take a share
  FrameId first_active = -1;
  for (const auto& [id, s] : graph.states) {
    if (id > candidate.match && !s.pose_fixed) {
      first_active = id;
      break;
    }
  }
  std::vector<FrameId> chain_ids;
  for (const auto& [id, s] : graph.states) {
    if (id < candidate.match) continue;
    if (first_active >= 0 && id >= first_active) break;
    if (id == candidate.match || s.pose_fixed) chain_ids.push_back(id);
  }
  if (chain_ids.size() >= 2) {
    std::vector<Pose> chain;
    for (FrameId id : chain_ids) chain.push_back(graph.states.at(id).x.pose());
    const auto moved = distribute_loop_error(chain, D * chain.back());
    for (std::size_t k = 1; k < chain_ids.size(); ++k) {
      move_state(graph.states.at(chain_ids[k]), moved[k]);
    }
  }

  // rigid move of the active window and the landmarks it observes
  std::set<LandmarkId> window_landmarks;
  for (const auto& o : graph.observations) {
    if (!graph.states.at(o.frame).pose_fixed) window_landmarks.insert(o.landmark);
  }
  for (auto& [id, s] : graph.states) {
    if (!s.pose_fixed) move_state(s, D * s.x.pose());
  }
  for (LandmarkId id : window_landmarks) {
    auto& l = graph.landmarks.at(id);
    l.p_W = D.transform(l.p_W);
  }

  // revive the match's edges and merge by tag
  const Revival rv = revive_factors(graph, index, W_obs, [&](const TwoPoseFactor& f) {
    return f.connects(candidate.match);
  });
  result.loop_frames = rv.frames;
  result.revived_factors = rv.factors;
  result.revived_observations = rv.observations;
  result.merged_landmarks = rv.merged_landmarks;
  return result;
}

OptReport run_background_optimization(FactorGraph& graph, double t_loop,
                                      const SolverOptions& options) {
  for (auto& [id, s] : graph.states) {
    const bool free = s.t >= t_loop;
    s.pose_fixed = !free;
    s.speed_bias_fixed = !free;
    s.gauge_fixed = false;
  }
  return optimize(graph, options);
}

void import_result(FactorGraph& realtime, const FactorGraph& job) {
  FrameId newest_shared = -1;
  for (const auto& [id, s] : job.states) {
    if (realtime.states.contains(id)) newest_shared = std::max(newest_shared, id);
  }
  if (newest_shared < 0) return;
  const Pose D = job.states.at(newest_shared).x.pose() *
                 realtime.states.at(newest_shared).x.pose().inverse();
  for (auto& [id, s] : realtime.states) {
    const auto it = job.states.find(id);
    if (it != job.states.end()) {
      s.x = it->second.x;
    } else {
      move_state(s, D * s.x.pose());
    }
  }
  for (auto& [id, l] : realtime.landmarks) {
    const auto it = job.landmarks.find(id);
    l.p_W = it != job.landmarks.end() ? it->second.p_W : D.transform(l.p_W);
  }
}

LoopJob::~LoopJob() { wait(); }

void LoopJob::start(FactorGraph graph, double t_loop, FrameId started_at, FrameId loop_frame,
                    const SolverOptions& options) {
  wait();
  graph_ = std::move(graph);
  report_ = OptReport{};
  started_at_ = started_at;
  loop_frame_ = loop_frame;
  active_ = true;
  worker_ = std::thread([this, t_loop, options] {
    report_ = run_background_optimization(graph_, t_loop, options);
  });
}

void LoopJob::wait() {
  if (worker_.joinable()) worker_.join();
}

}  // namespace vigraph
