#pragma once

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "json.hpp"

#include "vigraph/eval.hpp"
#include "vigraph/factor_graph.hpp"
#include "vigraph/loopclosure.hpp"
#include "vigraph/marginal.hpp"
#include "vigraph/sim.hpp"
#include "vigraph/solver.hpp"

namespace vigraph {

struct WindowConfig {
  int recent = 3;           // T
  int max_keyframes = 5;    // |K \ recent|
  int max_loop_frames = 5;  // |L|
  int a_min = 12;
  double delta_t = 2.0;           // [s]
  double keypoint_radius = 15.0;  // r_kpt [px]
  double overlap_threshold = 0.55;
  int raster_downsample = 4;

  void validate() const;
};

struct FrontendConfig {
  double pixel_sigma = 1.0;
  /// Predicted reprojection must be this close for a keypoint to match.
  double match_gate_px = 25.0;
  double triangulation_max_error_px = 3.0;
  double min_depth = 0.1;
  double max_depth = 50.0;
  int init_samples = 20;
  double imu_gap_max = 0.1;  // [s]

  void validate() const;
};

/// Prior on the first state's speed and biases.
struct PriorConfig {
  double sigma_v = 0.1;
  double sigma_bg = 0.01;
  double sigma_ba = 0.1;
};

/// Bias drift that triggers re-integration of an IMU factor.
struct RelinearizeConfig {
  double bg = 1e-3;
  double ba = 1e-2;
};

enum class Mode { kVio, kSlam };
std::string to_string(Mode mode);
Mode mode_from_string(const std::string& name);

struct EstimatorConfig {
  WindowConfig window;
  FrontendConfig frontend;
  SolverOptions solver;
  SolverOptions final_solver = [] {
    SolverOptions o;
    o.max_iterations = 50;
    return o;
  }();
  TwoPoseOptions two_pose;
  LoopConfig loop;
  PriorConfig prior;
  RelinearizeConfig relinearize;
  ImuParams imu;
  CameraRig rig = CameraRig::stereo_default();

  /// Throws std::invalid_argument.
  void validate() const;
};

nlohmann::json to_json(const EstimatorConfig& config);
/// Keys absent from j keep the value in base. Unknown keys and bad values
/// throw std::invalid_argument.
EstimatorConfig estimator_config_from_json(const nlohmann::json& j, EstimatorConfig base = {});

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fraction of the keypoint area covered by the counted keypoints. Each
/// keypoint is a filled circle of radius_px rasterized per camera on a grid
/// downsampled by `downsample`; areas of all cameras are summed. Returns 0
/// when there are no keypoints.
double overlap_fraction(const CameraRig& rig, std::span<const SimObservation> keypoints,
                        const std::vector<bool>& counted, double radius_px, int downsample);

using FramePair = std::pair<FrameId, FrameId>;  // (smaller id, larger id)

/// Maximum spanning forest over the nodes by Kruskal. Pairs missing from
/// weights or with weight 0 are not edges. Equal weights are taken in
/// ascending (smaller id, larger id) order.
std::vector<FramePair> max_spanning_tree(const std::vector<FrameId>& nodes,
                                         const std::map<FramePair, int>& weights);

/// A = max(a_min, number of states with t in (now - delta_t, now]).
int variable_state_count(std::span<const double> times, int a_min, double delta_t);

struct Ray {
  Pose T_WC;
  Vec3 direction;  // in camera coordinates
};
/// Least-squares intersection of rays (closest point to all lines). Empty
/// for fewer than 2 rays or near-parallel rays.
std::optional<Vec3> intersect_rays(std::span<const Ray> rays);

enum class FrameSet { kRecent, kKeyframe, kPosegraph };

struct FrameEntry {
  FrameId id = 0;
  double t = 0.0;
  bool keyframe = false;
  FrameSet set = FrameSet::kRecent;
  std::vector<SimObservation> keypoints;  // kept while in recent or K
};

struct WindowStats {
  FrameId frame = 0;
  int recent = 0;
  int keyframes = 0;  // K \ recent
  int posegraph = 0;
  int loop = 0;
  int states = 0;
  int a_min = 0;
  int a_dt = 0;
  int variable_limit = 0;  // A
  int variable_states = 0;
};

struct FrameTimings {
  double ingest = 0, keyframe = 0, triangulate = 0, maintain_window = 0, import = 0,
         fixation = 0, optimize = 0, loop = 0, total = 0;  // [ms]
};

/// Realtime windowed estimator fed with IMU samples and keypoint frames.
class Estimator {
 public:
  Estimator(EstimatorConfig config, Mode mode);
  ~Estimator();

  /// Samples must arrive in time order.
  void add_imu(std::span<const ImuSample> samples);
  /// Processes one frame. Throws DatasetError on bad input and
  /// DivergenceError when the optimization fails.
  void process(const SimFrame& frame);

  /// Estimate of the last processed frame.
  StampedPose causal_pose() const;
  /// Every processed frame at its current estimate. In slam mode a pending
  /// background job is imported and the whole graph optimized first.
  Trajectory finish();

  const FactorGraph& graph() const { return graph_; }
  const std::map<FrameId, FrameEntry>& frames() const { return frames_; }
  const std::deque<FrameId>& recent() const { return recent_; }
  const std::set<FrameId>& keyframes() const { return keyframes_; }
  const std::set<FrameId>& loop_frames() const { return loop_frames_; }
  WindowStats window_stats() const;
  const std::vector<nlohmann::json>& events() const { return events_; }
  const std::vector<FrameTimings>& timings() const { return timings_; }

  /// Number of landmarks co-observed by two frames in the graph.
  int covisibility(FrameId a, FrameId b) const;
  /// Builds the posegraph edges of frame r and removes its observations.
  /// Returns the frames it was connected to.
  std::vector<FrameId> create_posegraph_edges(FrameId r);

 private:
  void initialize(const SimFrame& frame);
  void ingest(const SimFrame& frame);
  void associate(FrameId f);
  bool keyframe_decision(FrameId f, FrameId* current_keyframe);
  void triangulate(FrameId f);
  void maintain_window(FrameId live, FrameId current_keyframe);
  void drop_frame(FrameId f);
  void demote(FrameId r);
  void prune_loop_frames();
  void update_fixation();
  void run_optimizer(const SolverOptions& options);
  void relinearize_imu();
  void import_job(FrameId f);
  void loop_step(FrameId f);
  void remove_orphans();
  void event(nlohmann::json e);
  Mat2 observation_information() const;

  EstimatorConfig cfg_;
  Mode mode_;
  FactorGraph graph_;
  LandmarkIndex index_;
  std::map<FrameId, FrameEntry> frames_;  // frames that are graph states
  std::deque<FrameId> recent_;
  std::set<FrameId> keyframes_;  // K \ recent
  std::set<FrameId> loop_frames_;
  std::vector<ImuSample> imu_;
  struct Dropped {
    double t;
    FrameId anchor;
    Pose T_anchor_frame;
  };
  std::map<FrameId, Dropped> dropped_;
  std::vector<KeyframeDescriptor> database_;
  LoopJob job_;
  long frame_count_ = 0;
  long cooldown_until_ = 0;
  FrameId last_frame_ = -1;
  double last_t_ = 0.0;
  std::vector<nlohmann::json> events_;
  std::vector<FrameTimings> timings_;
};

}  // namespace vigraph
