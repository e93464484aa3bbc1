#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "vigraph/factor_graph.hpp"
#include "vigraph/sim.hpp"
#include "vigraph/solver.hpp"

namespace vigraph {

struct LoopConfig {
  int n_recent = 20;       // candidates must be at least this many frames older
  int min_shared = 15;     // co-observed landmark tags to report a candidate
  int min_inliers = 10;
  double min_inlier_ratio = 0.5;
  double inlier_sigmas = 3.0;
  /// Candidates whose pose correction exceeds either bound are not verified.
  double max_correction_m = 1.0;
  double max_correction_deg = 10.0;
  int job_iterations = 50;
  /// The background result is imported this many frames after the start.
  int import_delay_frames = 5;
  /// Frames after an import before recognition resumes.
  int cooldown_frames = 10;
  /// Probability that the oracle misses a true revisit.
  double false_negative_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Recognition database entry: a past keyframe and the tags it observed.
struct KeyframeDescriptor {
  FrameId id = 0;
  std::vector<LandmarkId> tags;  // sorted, unique
};

struct LoopCandidate {
  FrameId query = 0;
  FrameId match = 0;
  std::vector<LandmarkId> shared_tags;
  int correspondences = 0;
  int inliers = 0;
  double inlier_ratio = 0.0;
  bool verified = false;
  Pose T_WS_corrected;  // query pose implied by the matched landmarks
  Pose correction;      // world-frame change: corrected = correction * estimate
  double correction_m = 0.0;
  double correction_rad = 0.0;
};

std::vector<LandmarkId> sorted_tags(std::span<const SimObservation> keypoints);

/// Tag -> world position of the landmarks archived in the two-pose factors
/// incident to frame l and observed from l.
std::map<LandmarkId, Vec3> loop_landmarks(const FactorGraph& graph, FrameId l);

/// Place recognition against a database of past keyframes followed by
/// geometric verification of the query pose. Returns nothing when no
/// candidate shares enough tags.
std::optional<LoopCandidate> recognize(const FactorGraph& graph, FrameId query,
                                       std::span<const SimObservation> keypoints,
                                       std::span<const KeyframeDescriptor> database,
                                       const LoopConfig& config, double pixel_sigma);

/// Splits the discrepancy between chain.back() and target over the chain in
/// equal parts: pose k is rotated by Exp(k/n Log(dq)) and then shifted by k/n
/// of the remaining position gap, where n = chain.size() - 1. chain.front()
/// stays put and the last pose ends exactly at target. Throws
/// std::invalid_argument for fewer than 2 poses or a rotation gap >= pi.
std::vector<Pose> distribute_loop_error(const std::vector<Pose>& chain, const Pose& target);

struct Revival {
  std::vector<FrameId> frames;  // frames that received observations
  int factors = 0;
  int observations = 0;
  int merged_landmarks = 0;
};

/// Revives the unconsumed two-pose factors selected by `which`, merges their
/// landmarks into active ones by tag, skips duplicate observations and
/// erases the consumed factors.
Revival revive_factors(FactorGraph& graph, LandmarkIndex& index, const Mat2& W_obs,
                       const std::function<bool(const TwoPoseFactor&)>& which);

struct RelocalizeResult {
  std::vector<FrameId> loop_frames;  // frames that received revived observations
  int revived_factors = 0;
  int revived_observations = 0;
  int merged_landmarks = 0;
};

/// Applies a verified candidate: distributes the correction over the fixed
/// states between the match and the active window, moves the active window
/// and its landmarks rigidly, revives the two-pose factors incident to the
/// match and merges revived landmarks into active ones by tag. Throws
/// std::invalid_argument for an unverified candidate.
RelocalizeResult relocalize(FactorGraph& graph, const LoopCandidate& candidate,
                            LandmarkIndex& index, const Mat2& W_obs);

/// Frees every state at or after t_loop, fixes the earlier ones and runs the
/// solver on the graph.
OptReport run_background_optimization(FactorGraph& graph, double t_loop,
                                      const SolverOptions& options);

/// Overwrites states and landmarks present in both graphs with the job's
/// values; states and landmarks only in the realtime graph follow the change
/// of the newest shared state rigidly.
void import_result(FactorGraph& realtime, const FactorGraph& job);

/// Background optimization of a graph copy on a worker thread.
class LoopJob {
 public:
  LoopJob() = default;
  LoopJob(const LoopJob&) = delete;
  LoopJob& operator=(const LoopJob&) = delete;
  ~LoopJob();

  void start(FactorGraph graph, double t_loop, FrameId started_at, FrameId loop_frame,
             const SolverOptions& options);
  /// Blocks until the worker is finished.
  void wait();

  bool active() const { return active_; }
  void clear() { active_ = false; }

  FrameId started_at() const { return started_at_; }
  FrameId loop_frame() const { return loop_frame_; }
  const FactorGraph& graph() const { return graph_; }
  const OptReport& report() const { return report_; }

 private:
  std::thread worker_;
  bool active_ = false;
  FactorGraph graph_;
  OptReport report_;
  FrameId started_at_ = 0;
  FrameId loop_frame_ = 0;
};

}  // namespace vigraph
