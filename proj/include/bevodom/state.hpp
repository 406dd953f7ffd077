// Estimator state on its manifold and the 18-D error-state parameterization.
// Every Jacobian producer in the project uses the column layout fixed here.
#pragma once

#include "bevodom/geometry.hpp"

namespace bevodom {

// Error-state column layout, order (dtheta, dp, dv, dba, dbg, dg).
namespace err {
inline constexpr int kTheta = 0;
inline constexpr int kPos = 3;
inline constexpr int kVel = 6;
inline constexpr int kBa = 9;
inline constexpr int kBg = 12;
inline constexpr int kGrav = 15;
inline constexpr int kDim = 18;
}  // namespace err

using ErrorState = Eigen::Matrix<double, err::kDim, 1>;
using Covariance = Eigen::Matrix<double, err::kDim, err::kDim>;

struct NavState {
  Mat3 R_WI = Mat3::Identity();       // IMU orientation in world
  Vec3 p_WI = Vec3::Zero();           // IMU position in world [m]
  Vec3 v_W = Vec3::Zero();            // velocity in world [m/s]
  Vec3 b_a = Vec3::Zero();            // accelerometer bias [m/s^2]
  Vec3 b_g = Vec3::Zero();            // gyroscope bias [rad/s]
  Vec3 g_W = Vec3(0.0, 0.0, -9.81);   // gravity in world [m/s^2]

  Pose3 pose() const { return {R_WI, p_WI}; }
};

// LiDAR-to-IMU extrinsic calibration, fixed from configuration.
struct Extrinsics {
  Pose3 T_IL;
};

// Retraction: rotation error is applied right-multiplicatively,
// R <- R * exp(dtheta); the vector blocks are plain additions.
NavState boxplus(const NavState& x, const ErrorState& delta);

// Local inverse of boxplus: dtheta = log(b.R^T * a.R), vectors subtract.
ErrorState boxminus(const NavState& a, const NavState& b);

}  // namespace bevodom
