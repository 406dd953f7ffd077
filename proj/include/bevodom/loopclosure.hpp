// Back-end: keyframe database with global-descriptor retrieval, BEV coarse
// alignment, ICP refinement, and pose-graph optimization.
#pragma once

#include <optional>

#include "bevodom/fusion.hpp"
#include "bevodom/imu.hpp"

namespace bevodom {

// Exact nearest-neighbor kd-tree over fixed-dimension float vectors.
// High-dimensional queries degenerate toward a linear scan, which is
// acceptable: exactness is the contract, speed is secondary.
class KdTreeX {
 public:
  void build(const std::vector<Descriptor>& vecs,
             const std::vector<int64_t>& ids);
  size_t size() const { return vecs_.size(); }

  // k nearest by L2, optionally filtered by an id predicate. Results are
  // (id, squared distance), nearest first; ties broken by lower id.
  std::vector<std::pair<int64_t, float>> knn(
      const Descriptor& q, int k,
      const std::function<bool(int64_t)>& accept = {}) const;

 private:
  struct Node {
    int left = -1, right = -1;
    int axis = 0;
    int vec_id = -1;
  };
  int build_recursive(std::span<int> idx, int depth);
  void search(int node, const Descriptor& q, int k,
              const std::function<bool(int64_t)>& accept,
              std::vector<std::pair<float, int64_t>>& heap) const;

  std::vector<Descriptor> vecs_;
  std::vector<int64_t> ids_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

struct Keyframe {
  int64_t id = 0;
  double timestamp = 0.0;
  std::vector<Vec3> scan;      // undistorted, LiDAR frame at scan end
  Pose3 T_G;                   // global pose (world from LiDAR-carrier IMU)
  Descriptor global_desc;
  FeatureFrame features;       // cached BEV projection + keypoints + locals
  Covariance odom_cov = Covariance::Identity();
};

// Append-only keyframe store; the descriptor index is rebuilt every
// rebuild_every insertions and the tail is scanned linearly in between.
class KeyframeDatabase {
 public:
  explicit KeyframeDatabase(int rebuild_every = 50)
      : rebuild_every_(rebuild_every) {}

  int64_t add_keyframe(Keyframe kf);
  size_t size() const { return frames_.size(); }
  const Keyframe& frame(int64_t id) const { return frames_.at(id); }
  Keyframe& frame(int64_t id) { return frames_.at(id); }

  // k nearest global descriptors with id filtering; exact.
  std::vector<std::pair<int64_t, float>> query(
      const Descriptor& q, int k,
      const std::function<bool(int64_t)>& accept = {}) const;

 private:
  int rebuild_every_;
  std::vector<Keyframe> frames_;
  KdTreeX index_;
  size_t indexed_ = 0;
};

enum class LoopStage { kRetrieved, kCoarseAligned, kRefined, kRejected };

struct LoopCandidate {
  int64_t query_id = -1;
  int64_t ref_id = -1;
  float desc_distance = 0.0f;
  LoopStage stage = LoopStage::kRetrieved;
  std::string reject_reason;
  Pose3 T_rq_coarse;
  int ransac_inliers = 0;
};

struct LoopConstraint {
  int64_t ref_id = -1;
  int64_t query_id = -1;
  Pose3 T_rq;  // maps query-frame coordinates into the reference frame
  Eigen::Matrix<double, 6, 6> information =
      Eigen::Matrix<double, 6, 6>::Identity();
  double icp_rms = 0.0;
};

struct LoopConfig {
  int k = 3;                     // retrieval candidates
  double tau = 10.0;             // pose-distance gate [m]
  bool tau_gate_enabled = true;
  int64_t min_gap = 50;          // keyframe id separation
  int icp_max_iter = 30;
  double icp_max_corr = 1.0;     // correspondence distance [m]
  double icp_rms_thresh = 0.3;   // accept when inlier RMS below [m]
  double icp_min_inlier_frac = 0.4;
  double noise_rot_sigma = 0.01;   // [rad]
  double noise_trans_sigma = 0.05; // [m]
  FeatureConfig features;          // matching + RANSAC parameters
};

// Retrieval (descriptor kNN + pose gate). Candidates keep their stage so
// rejections stay visible in the event log.
std::vector<LoopCandidate> detect(const KeyframeDatabase& db,
                                  const Keyframe& query,
                                  const LoopConfig& cfg);

// BEV feature matching + rigid-2D RANSAC between the cached frames,
// lifted to a planar SE(3) initial guess for T_rq.
std::optional<Pose3> coarse_align(LoopCandidate& cand,
                                  const KeyframeDatabase& db,
                                  const LoopConfig& cfg,
                                  std::mt19937_64& rng);

struct IcpResult {
  Pose3 transform;
  double rms = 0.0;
  double inlier_fraction = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Point-to-point ICP aligning source onto target from an initial guess.
IcpResult icp_point2point(std::span<const Vec3> source,
                          std::span<const Vec3> target, const Pose3& T_init,
                          int max_iter, double max_corr);

// ICP refinement with the fitness gate; rejection returns nullopt.
std::optional<LoopConstraint> refine_icp(LoopCandidate& cand,
                                         const KeyframeDatabase& db,
                                         const Pose3& T_init,
                                         const LoopConfig& cfg);

// T_q = T_G_r * T_rq.
Pose3 global_pose(const Pose3& T_G_r, const Pose3& T_rq);

// ---------------------------------------------------------------------------
// Pose graph

struct PriorFactor {
  int node = 0;
  Pose3 pose;
  Eigen::Matrix<double, 6, 6> information =
      Eigen::Matrix<double, 6, 6>::Identity();
};

struct BetweenFactor {
  int from = 0;
  int to = 0;
  Pose3 measured;  // T_from^-1 * T_to
  Eigen::Matrix<double, 6, 6> information =
      Eigen::Matrix<double, 6, 6>::Identity();
};

struct PoseGraph {
  std::vector<Pose3> nodes;
  std::vector<PriorFactor> priors;
  std::vector<BetweenFactor> betweens;
};

struct OptimizeResult {
  bool success = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_trace;  // cost after each accepted step
  std::string message;
};

// Levenberg-Marquardt over the node poses (right-multiplicative rotation
// perturbation). Cost never increases across accepted steps; terminates on
// relative cost change < 1e-8 or 50 iterations.
OptimizeResult optimize(PoseGraph& graph, int max_iter = 50,
                        double rel_tol = 1e-8);

double graph_cost(const PoseGraph& graph);

// Re-anchors non-keyframe poses to their bracketing (preceding) keyframe,
// preserving the odometry-relative transforms.
// keyframe_anchor[i] gives, for trajectory entry i, the index into
// old_kf_poses/new_kf_poses of its anchor (or -1 to leave it unchanged).
std::vector<Pose3> propagate_correction(
    const std::vector<Pose3>& trajectory, const std::vector<int>& anchor,
    const std::vector<Pose3>& old_kf_poses,
    const std::vector<Pose3>& new_kf_poses);

}  // namespace bevodom
