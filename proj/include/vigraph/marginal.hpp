#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

#include "vigraph/camera.hpp"
#include "vigraph/geometry.hpp"
#include "vigraph/types.hpp"

namespace vigraph {

/// Singular values below this fraction of the largest count as zero.
inline constexpr double kPseudoInverseTolerance = 1e-8;

/// Pseudo-inverse of a symmetric positive semi-definite matrix.
template <typename Derived>
typename Derived::PlainObject pseudo_inverse_psd(
    const Eigen::MatrixBase<Derived>& A,
    double rel_tol = kPseudoInverseTolerance);

enum class PairFrame { kRef, kOther };

struct PairObservation {
  int cam = 0;
  LandmarkId landmark = 0;
  PairFrame frame = PairFrame::kRef;
  Vec2 measurement = Vec2::Zero();
};

struct LandmarkSystemBlock {
  LandmarkId id = 0;
  Mat63 H_pj = Mat63::Zero();
  Mat3 H_jj = Mat3::Zero();
  Vec3 b_j = Vec3::Zero();
};

/// Gauss-Newton system of the joint two-frame cost over the relative pose
/// p = T_SrSc (first) and the landmarks in S^r coordinates. b = -J^T W e.
struct TwoFrameSystem {
  Mat6 H_pp = Mat6::Zero();
  Vec6 b_p = Vec6::Zero();
  std::vector<LandmarkSystemBlock> landmarks;  // ascending id
};

struct ReducedSystem {
  Mat6 H_star = Mat6::Zero();
  Vec6 b_star = Vec6::Zero();
};

class InsufficientObservations : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws InsufficientObservations when there is nothing to assemble.
TwoFrameSystem build_two_frame_system(
    std::span<const PairObservation> observations,
    const std::map<LandmarkId, Vec3>& landmarks_Sr, const Pose& T_SrSc,
    const CameraRig& rig, const Mat2& W_r);

ReducedSystem schur_marginalize(const TwoFrameSystem& system);

struct ArchivedObservation {
  FrameId frame = 0;
  int cam = 0;
  LandmarkId landmark = 0;
  Vec2 measurement = Vec2::Zero();
};

struct ArchivedLandmark {
  LandmarkId id = 0;
  LandmarkId tag = kNoTag;
  Vec3 p_Sr = Vec3::Zero();
};

/// Relative-pose factor obtained by marginalizing the landmarks co-observed
/// by two frames. Evaluates e = e0 + [r - r~; q [-] q~] on T_SrSc.
struct TwoPoseFactor {
  FrameId ref = 0;
  FrameId other = 0;
  Pose T_lin;  // linearization point of T_SrSc
  Vec6 e0 = Vec6::Zero();
  Mat6 W = Mat6::Zero();
  Mat6 sqrt_W = Mat6::Zero();  // W == sqrt_W^T sqrt_W
  int joint_landmarks = 0;
  std::vector<ArchivedObservation> observations;
  std::vector<ArchivedLandmark> landmarks;
  bool consumed = false;

  bool connects(FrameId f) const { return f == ref || f == other; }
};

struct WorldLandmark {
  Vec3 p_W = Vec3::Zero();
  LandmarkId tag = kNoTag;
};

struct TwoPoseOptions {
  int min_joint_landmarks = 8;
  /// Observations whose error exceeds this in either coordinate are skipped.
  double reprojection_gate_px = 2.5;
};

/// Builds the factor from all observations of frames r and c on landmarks
/// seen by r (landmarks seen only by c stay untouched). Observations actually
/// used are listed in the factor's archive. Throws InsufficientObservations
/// when fewer than min_joint_landmarks landmarks are seen by both frames.
TwoPoseFactor make_two_pose_factor(
    FrameId r, FrameId c, std::span<const ReprojectionFactor> observations,
    const std::map<LandmarkId, WorldLandmark>& landmarks, const Pose& T_WSr,
    const Pose& T_WSc, const CameraRig& rig, const Mat2& W_r,
    const TwoPoseOptions& options = {});

struct TwoPoseErrorResult {
  Vec6 error;
  Mat6 J_ref;    // w.r.t. [dr, dalpha] of T_WSr
  Mat6 J_other;  // w.r.t. [dr, dalpha] of T_WSc
};

TwoPoseErrorResult eval_two_pose_error(const TwoPoseFactor& factor,
                                       const Pose& T_WSr, const Pose& T_WSc);

struct RevivedLandmark {
  LandmarkId id = 0;
  LandmarkId tag = kNoTag;
  Vec3 p_W = Vec3::Zero();
};

struct Revived {
  std::vector<ReprojectionFactor> observations;
  std::vector<RevivedLandmark> landmarks;
};

/// Turns the factor back into observations and World landmarks using the
/// current reference pose, and marks it consumed. Throws std::logic_error if
/// it was consumed already.
Revived revive(TwoPoseFactor& factor, const Pose& T_WSr, const Mat2& W_r);

/// Landmarks archived in more than one factor, with their multiplicity.
/// Edges sharing a frame reuse that frame's observations.
std::map<LandmarkId, int> duplicated_landmarks(
    std::span<const TwoPoseFactor> factors);

// ---------------------------------------------------------------------------

template <typename Derived>
typename Derived::PlainObject pseudo_inverse_psd(
    const Eigen::MatrixBase<Derived>& A, double rel_tol) {
  using Plain = typename Derived::PlainObject;
  Eigen::SelfAdjointEigenSolver<Plain> eig(A.derived());
  const auto& ev = eig.eigenvalues();
  const double max_ev = ev.cwiseAbs().maxCoeff();
  Plain out = Plain::Zero(A.rows(), A.cols());
  if (max_ev <= 0.0) return out;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > rel_tol * max_ev) {
      out += (1.0 / ev(i)) * eig.eigenvectors().col(i) *
             eig.eigenvectors().col(i).transpose();
    }
  }
  return out;
}

}  // namespace vigraph
