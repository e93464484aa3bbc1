#include "vigraph/marginal.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vigraph {

namespace {

Mat6 symmetric_sqrt_factor(const Mat6& W) {
  Eigen::SelfAdjointEigenSolver<Mat6> eig(W);
  Mat6 S = Mat6::Zero();
  for (int i = 0; i < 6; ++i) {
    const double ev = std::max(0.0, eig.eigenvalues()(i));
    S.row(i) = std::sqrt(ev) * eig.eigenvectors().col(i).transpose();
  }
  return S;
}

}  // namespace

TwoFrameSystem build_two_frame_system(
    std::span<const PairObservation> observations,
    const std::map<LandmarkId, Vec3>& landmarks_Sr, const Pose& T_SrSc,
    const CameraRig& rig, const Mat2& W_r) {
  if (observations.empty()) {
    throw InsufficientObservations("two-frame system: no observations");
  }
  TwoFrameSystem sys;
  std::map<LandmarkId, std::size_t> index;
  for (const auto& [id, p] : landmarks_Sr) {
    index.emplace(id, sys.landmarks.size());
    sys.landmarks.push_back(LandmarkSystemBlock{id, Mat63::Zero(), Mat3::Zero(),
                                                Vec3::Zero()});
  }

  for (const PairObservation& obs : observations) {
    const auto it = landmarks_Sr.find(obs.landmark);
    if (it == landmarks_Sr.end()) {
      throw std::invalid_argument("two-frame system: unknown landmark");
    }
    const Vec4 l(it->second.x(), it->second.y(), it->second.z(), 1.0);
    const bool in_ref = obs.frame == PairFrame::kRef;
    const Pose& T = in_ref ? Pose::identity() : T_SrSc;
    const auto res = reprojection_error(rig, obs.cam, T, l, obs.measurement);
    if (!res) continue;

    LandmarkSystemBlock& block = sys.landmarks[index.at(obs.landmark)];
    const Mat23 WJl = W_r * res->J_landmark;
    block.H_jj += res->J_landmark.transpose() * WJl;
    block.b_j -= res->J_landmark.transpose() * (W_r * res->error);
    if (!in_ref) {
      // reference-frame observations do not depend on the relative pose
      sys.H_pp += res->J_pose.transpose() * W_r * res->J_pose;
      block.H_pj += res->J_pose.transpose() * WJl;
      sys.b_p -= res->J_pose.transpose() * (W_r * res->error);
    }
  }
  return sys;
}

ReducedSystem schur_marginalize(const TwoFrameSystem& system) {
  ReducedSystem out;
  out.H_star = system.H_pp;
  out.b_star = system.b_p;
  for (const LandmarkSystemBlock& block : system.landmarks) {
    if (block.H_pj.isZero(0.0)) continue;
    const Mat3 H_jj_inv = pseudo_inverse_psd(block.H_jj);
    const Mat63 K = block.H_pj * H_jj_inv;
    out.H_star -= K * block.H_pj.transpose();
    out.b_star -= K * block.b_j;
  }
  out.H_star = (0.5 * (out.H_star + out.H_star.transpose())).eval();
  return out;
}

TwoPoseFactor make_two_pose_factor(
    FrameId r, FrameId c, std::span<const ReprojectionFactor> observations,
    const std::map<LandmarkId, WorldLandmark>& landmarks, const Pose& T_WSr,
    const Pose& T_WSc, const CameraRig& rig, const Mat2& W_r,
    const TwoPoseOptions& options) {
  const Pose T_SrW = T_WSr.inverse();
  const Pose T_SrSc = T_SrW * T_WSc;

  auto well_fitting = [&](const ReprojectionFactor& obs, const Pose& T_WS) {
    const WorldLandmark& lm = landmarks.at(obs.landmark);
    const Vec4 l(lm.p_W.x(), lm.p_W.y(), lm.p_W.z(), 1.0);
    const auto res = reprojection_error(rig, obs.cam, T_WS, l, obs.measurement);
    return res && res->error.cwiseAbs().maxCoeff() <= options.reprojection_gate_px;
  };

  std::vector<const ReprojectionFactor*> in_r;
  std::vector<const ReprojectionFactor*> in_c;
  std::set<LandmarkId> seen_r;
  std::set<LandmarkId> seen_c;
  for (const ReprojectionFactor& obs : observations) {
    if (!landmarks.contains(obs.landmark)) continue;
    if (obs.frame == r && well_fitting(obs, T_WSr)) {
      in_r.push_back(&obs);
      seen_r.insert(obs.landmark);
    } else if (obs.frame == c && well_fitting(obs, T_WSc)) {
      in_c.push_back(&obs);
      seen_c.insert(obs.landmark);
    }
  }
  std::set<LandmarkId> joint;
  std::set_intersection(seen_r.begin(), seen_r.end(), seen_c.begin(),
                        seen_c.end(), std::inserter(joint, joint.begin()));
  if (static_cast<int>(joint.size()) < options.min_joint_landmarks) {
    throw InsufficientObservations("two-pose factor: too few joint landmarks");
  }

  TwoPoseFactor factor;
  factor.ref = r;
  factor.other = c;
  factor.T_lin = T_SrSc;
  factor.joint_landmarks = static_cast<int>(joint.size());

  std::map<LandmarkId, Vec3> landmarks_Sr;
  for (LandmarkId id : seen_r) {
    const WorldLandmark& lm = landmarks.at(id);
    const Vec3 p_Sr = T_SrW.transform(lm.p_W);
    landmarks_Sr.emplace(id, p_Sr);
    factor.landmarks.push_back(ArchivedLandmark{id, lm.tag, p_Sr});
  }

  std::vector<PairObservation> pair_obs;
  for (const ReprojectionFactor* obs : in_r) {
    pair_obs.push_back({obs->cam, obs->landmark, PairFrame::kRef, obs->measurement});
    factor.observations.push_back({r, obs->cam, obs->landmark, obs->measurement});
  }
  for (const ReprojectionFactor* obs : in_c) {
    if (!joint.contains(obs->landmark)) continue;
    pair_obs.push_back({obs->cam, obs->landmark, PairFrame::kOther, obs->measurement});
    factor.observations.push_back({c, obs->cam, obs->landmark, obs->measurement});
  }

  const TwoFrameSystem sys =
      build_two_frame_system(pair_obs, landmarks_Sr, T_SrSc, rig, W_r);
  const ReducedSystem reduced = schur_marginalize(sys);
  factor.W = reduced.H_star;
  factor.e0 = -pseudo_inverse_psd(reduced.H_star) * reduced.b_star;
  factor.sqrt_W = symmetric_sqrt_factor(factor.W);
  return factor;
}

TwoPoseErrorResult eval_two_pose_error(const TwoPoseFactor& factor,
                                       const Pose& T_WSr, const Pose& T_WSc) {
  const Mat3 R_rT = T_WSr.rotation().transpose();
  const Vec3 d = T_WSc.r - T_WSr.r;
  const Vec3 r_rc = R_rT * d;
  const Quat q_rc = T_WSr.q.conjugate() * T_WSc.q;
  const Vec3 phi = box_minus(q_rc, factor.T_lin.q);

  TwoPoseErrorResult out;
  out.error = factor.e0;
  out.error.head<3>() += r_rc - factor.T_lin.r;
  out.error.tail<3>() += phi;

  const Mat3 Jl_inv = left_jacobian_inv(phi);
  out.J_ref.setZero();
  out.J_other.setZero();
  out.J_ref.block<3, 3>(0, 0) = -R_rT;
  out.J_ref.block<3, 3>(0, 3) = R_rT * skew(d);
  out.J_ref.block<3, 3>(3, 3) = -Jl_inv * R_rT;
  out.J_other.block<3, 3>(0, 0) = R_rT;
  out.J_other.block<3, 3>(3, 3) = Jl_inv * R_rT;
  return out;
}

Revived revive(TwoPoseFactor& factor, const Pose& T_WSr, const Mat2& W_r) {
  if (factor.consumed) {
    throw std::logic_error("two-pose factor already revived");
  }
  Revived out;
  for (const ArchivedLandmark& lm : factor.landmarks) {
    out.landmarks.push_back({lm.id, lm.tag, T_WSr.transform(lm.p_Sr)});
  }
  for (const ArchivedObservation& obs : factor.observations) {
    out.observations.push_back(
        ReprojectionFactor{obs.frame, obs.landmark, obs.cam, obs.measurement, W_r});
  }
  factor.consumed = true;
  return out;
}

std::map<LandmarkId, int> duplicated_landmarks(
    std::span<const TwoPoseFactor> factors) {
  std::map<LandmarkId, int> count;
  for (const TwoPoseFactor& f : factors) {
    for (const ArchivedLandmark& lm : f.landmarks) ++count[lm.id];
  }
  std::erase_if(count, [](const auto& kv) { return kv.second < 2; });
  return count;
}

}  // namespace vigraph
