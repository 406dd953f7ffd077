// Trajectory evaluation: timestamp association, rigid SE(3) alignment
// (Umeyama, no scale), translational RMSE, and an SVG comparison plot.
#pragma once

#include "bevodom/dataset.hpp"

namespace bevodom {

struct AteResult {
  double rmse = 0.0;
  Vec3 per_axis_rmse = Vec3::Zero();
  double mean = 0.0;
  double max_error = 0.0;
  int pairs = 0;
  Pose3 alignment;  // applied to the estimate before differencing
};

// Associates by nearest timestamp within max_dt, aligns the estimate to
// the ground truth with a rigid transform, reports translational errors.
// Throws when fewer than 2 pairs associate.
AteResult evaluate_ate(std::span<const TrajectoryRecord> estimate,
                       std::span<const TrajectoryRecord> ground_truth,
                       double max_dt = 0.01);

// Rigid Umeyama alignment (no scale): the pose T minimizing
// sum || to[i] - T * from[i] ||^2.
Pose3 umeyama_alignment(std::span<const Vec3> from, std::span<const Vec3> to);

// Top-down (x, y) comparison plot of one or more named trajectories.
void write_trajectory_svg(
    const std::string& path,
    const std::vector<std::pair<std::string,
                                std::vector<TrajectoryRecord>>>& named);

}  // namespace bevodom
