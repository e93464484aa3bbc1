#pragma once

#include <array>
#include <map>
#include <vector>

#include "vigraph/camera.hpp"
#include "vigraph/imu.hpp"
#include "vigraph/marginal.hpp"
#include "vigraph/types.hpp"

namespace vigraph {

/// Which of the 15 local coordinates [dr, dalpha, dv, dbg, dba] may move.
using FreeMask = std::array<bool, 15>;

struct StateVariable {
  NavState x;
  double t = 0.0;
  bool pose_fixed = false;
  /// Position and world yaw held, roll and pitch free.
  bool gauge_fixed = false;
  bool speed_bias_fixed = false;

  FreeMask free_mask() const;
  bool any_free() const;
};

struct LandmarkVariable {
  Vec3 p_W = Vec3::Zero();
  LandmarkId tag = kNoTag;
  bool fixed = false;
};

/// Independent Gaussian prior on the speed and bias blocks [v, bg, ba] of one
/// state. The residual is linear in those coordinates.
struct SpeedBiasPrior {
  FrameId frame = 0;
  Eigen::Matrix<double, 9, 1> mean = Eigen::Matrix<double, 9, 1>::Zero();
  Eigen::Matrix<double, 9, 1> sigma = Eigen::Matrix<double, 9, 1>::Ones();
};

struct FactorGraph {
  CameraRig rig;
  ImuParams imu;
  std::map<FrameId, StateVariable> states;
  std::map<LandmarkId, LandmarkVariable> landmarks;
  std::vector<ReprojectionFactor> observations;
  std::vector<PreintegratedImu> imu_factors;
  std::vector<TwoPoseFactor> two_pose;
  std::vector<SpeedBiasPrior> priors;

  /// Throws std::logic_error if a factor references a missing variable.
  void validate() const;
};

/// Maps external landmark tags (simulated landmark ids) to the landmark
/// variables currently in a graph and hands out fresh variable ids.
struct LandmarkIndex {
  std::map<LandmarkId, LandmarkId> by_tag;
  LandmarkId next_id = 0;

  LandmarkId allocate() { return next_id++; }
  /// Variable id of an active tag, or -1.
  LandmarkId find(LandmarkId tag) const {
    const auto it = by_tag.find(tag);
    return it == by_tag.end() ? -1 : it->second;
  }
};

/// Cauchy loss rho(s) = b^2 log(1 + s / b^2) on a squared weighted norm.
double cauchy_rho(double s, double b);
double cauchy_rho_prime(double s, double b);

}  // namespace vigraph
