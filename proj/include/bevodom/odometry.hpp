// End-to-end odometry: propagate, undistort, project, feature channel,
// iterated update, map insertion, keyframing, and the concurrent loop
// back-end with pose-graph correction.
#pragma once

#include <ostream>

#include "bevodom/config.hpp"
#include "bevodom/dataset.hpp"
#include "bevodom/evaluate.hpp"

namespace bevodom {

struct LoopEvent {
  int64_t query_id = -1;
  int64_t ref_id = -1;
  float desc_distance = 0.0f;
  std::string stage;  // retrieved | coarse | refined | rejected
  std::string reason;
  int ransac_inliers = 0;
  double icp_rms = 0.0;
  bool accepted = false;
};

struct RunResult {
  std::vector<TrajectoryRecord> trajectory;  // odometry export, scan end times
  std::vector<TrajectoryRecord> corrected;   // loop mode only
  std::vector<LoopEvent> loop_events;
  int frames_total = 0;
  int frames_skipped = 0;
  int frames_feature_updates = 0;  // frames where the reprojection
                                   // channel contributed rows
  int keyframes = 0;
  int accepted_loops = 0;
  int trajectory_revision = 0;
  std::vector<std::vector<double>> lm_cost_traces;  // per optimization run
};

// Runs the front-end only; cfg.mode is ignored.
RunResult run_odometry(const RunConfig& cfg, const Dataset& data,
                       std::ostream* diagnostics = nullptr);

// Front-end plus the loop back-end on a separate thread; the corrected
// trajectory is the last published revision.
RunResult run_with_loop(const RunConfig& cfg, const Dataset& data,
                        std::ostream* diagnostics = nullptr,
                        std::ostream* loop_log = nullptr);

// Dispatches on cfg.mode ("odometry" or "loop").
RunResult run(const RunConfig& cfg, const Dataset& data,
              std::ostream* diagnostics = nullptr,
              std::ostream* loop_log = nullptr);

}  // namespace bevodom
