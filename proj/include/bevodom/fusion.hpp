// The iterated EKF update: reprojection residual rows from matched BEV
// features, residual stacking with the geometric channel, and the
// manifold Kalman iteration.
#pragma once

#include <functional>

#include "bevodom/features.hpp"
#include "bevodom/registration.hpp"

namespace bevodom {

// Everything the reprojection channel needs from one processed frame.
struct FeatureFrame {
  BevProjection proj;
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> locals;
  Pose3 T_WI;  // converged IMU pose at scan end (fixed for the next frame)
};

struct ReprojResidual {
  Vec2 z = Vec2::Zero();  // observed minus predicted pixel [px]
  Eigen::Matrix<double, 2, err::kDim> H =
      Eigen::Matrix<double, 2, err::kDim>::Zero();
  Vec2 pix_prev = Vec2::Zero();
  Vec2 pix_curr = Vec2::Zero();
  Vec3 p_curr_L = Vec3::Zero();  // source point, current LiDAR frame
};

struct FusionConfig {
  double lambda = 1.0;          // reprojection stack weight
  double eta = 1.0;             // projection Jacobian scale
  double alpha_geo = 0.0025;    // geometric noise variance [(0.05 m)^2]
  double alpha_proj = 2.25;     // reprojection noise variance [(1.5 px)^2]
  double reproj_gate_px = 20.0;
  int max_iter = 5;
  double eps_conv = 1e-4;
};

// One row pair per inlier match. The current keypoint's cell supplies the
// source 3-D point (minimum-range point of that cell); its pixel in the
// previous image is predicted through the relative pose implied by the
// current state iterate and compared with the matched previous
// observation. Both sides use the continuous projection of the cells'
// recorded points, so a perfectly aligned pair of identical frames yields
// exactly zero.
std::vector<ReprojResidual> build_reproj_residuals(
    const FeatureFrame& prev, const FeatureFrame& curr,
    const MatchSet& matches, const std::vector<uint8_t>& inlier_mask,
    const NavState& x, const Pose3& T_IL, const FusionConfig& cfg);

struct ResidualStack {
  Eigen::VectorXd z;
  Eigen::MatrixXd H;
  Eigen::VectorXd noise_var;  // per-row variance diagonal
  int geo_rows = 0;
  int proj_rows = 0;
};

// Geometric rows first, then lambda-scaled reprojection rows (z and H are
// both scaled); the noise diagonal carries alpha_geo / alpha_proj.
ResidualStack stack(const std::vector<GeoResidual>& geo,
                    const std::vector<ReprojResidual>& proj,
                    const FusionConfig& cfg);

struct ResidualBundle {
  std::vector<GeoResidual> geo;
  std::vector<ReprojResidual> proj;
};

// Re-evaluates residuals and Jacobians at each iterate.
using ResidualBuilder = std::function<ResidualBundle(const NavState&)>;

struct UpdateDiagnostics {
  int iterations = 0;
  int geo_count = 0;
  int proj_count = 0;
  double rms_geo = 0.0;
  double rms_proj = 0.0;
  bool converged = false;
  bool diverged = false;
  bool regularized = false;
  bool updated = false;
};

struct UpdateResult {
  NavState state;
  Covariance cov;
};

// Iterated update; the boxplus Jacobian is approximated by the identity.
// Divergence (three consecutive cost increases) reverts to the prior.
UpdateResult iekf_update(const NavState& prior, const Covariance& P,
                         const ResidualBuilder& builder,
                         const FusionConfig& cfg,
                         UpdateDiagnostics* diag = nullptr);

}  // namespace bevodom
