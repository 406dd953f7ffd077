// IMU forward propagation between LiDAR frames and per-point motion
// undistortion of sweeping scans.
#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "bevodom/state.hpp"

namespace bevodom {

struct ImuSample {
  double t = 0.0;   // seconds
  Vec3 accel = Vec3::Zero();  // specific force [m/s^2]
  Vec3 gyro = Vec3::Zero();   // angular rate [rad/s]
};

struct TimedPoint {
  Vec3 p = Vec3::Zero();   // LiDAR frame at acquisition time
  double offset = 0.0;     // relative to scan end, in [-period, 0]
};

struct RawScan {
  std::vector<TimedPoint> points;
  double end_time = 0.0;
};

struct UndistortedScan {
  std::vector<Vec3> points;  // LiDAR frame at end_time
  double end_time = 0.0;
};

struct ImuNoise {
  double sigma_g = 1.7e-4;   // gyro white noise [rad/s/sqrt(Hz)]
  double sigma_a = 2e-3;     // accel white noise [m/s^2/sqrt(Hz)]
  double sigma_bg = 1e-5;    // gyro bias random walk
  double sigma_ba = 3e-4;    // accel bias random walk
};

struct PropagationGapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Piecewise pose track recorded at IMU sample times. Interpolation is
// spherical-linear on rotation and linear on translation; queries outside
// the covered span clamp to the nearest knot and report it.
class PoseBuffer {
 public:
  struct Knot {
    double t = 0.0;
    Mat3 R = Mat3::Identity();
    Vec3 p = Vec3::Zero();
  };

  void push(double t, const Mat3& R, const Vec3& p) {
    knots_.push_back({t, R, p});
  }
  bool empty() const { return knots_.empty(); }
  double front_time() const { return knots_.front().t; }
  double back_time() const { return knots_.back().t; }
  const std::vector<Knot>& knots() const { return knots_; }

  // IMU pose at time t; sets *clamped when t falls outside the buffer.
  Pose3 interpolate(double t, bool* clamped = nullptr) const;

 private:
  std::vector<Knot> knots_;
};

struct PropagationResult {
  NavState state;
  Covariance cov;
  PoseBuffer buffer;
};

// Discrete mid-point propagation with first-order covariance transition.
// The sample span must cover [t0, t1] up to one IMU period at the edges;
// larger interior gaps raise PropagationGapError.
class ImuPropagator {
 public:
  explicit ImuPropagator(const ImuNoise& noise = {}, double max_gap = 0.05)
      : noise_(noise), max_gap_(max_gap) {}

  PropagationResult propagate(const NavState& x, const Covariance& P,
                              std::span<const ImuSample> samples, double t0,
                              double t1) const;

 private:
  ImuNoise noise_;
  double max_gap_;
};

// Re-expresses every point in the LiDAR frame at scan end using the pose
// at its own timestamp and the extrinsics. Timestamps outside the buffer
// clamp to the nearest edge; the count of such points is reported.
UndistortedScan undistort(const RawScan& scan, const PoseBuffer& buffer,
                          const Pose3& T_IL, int* clamped_count = nullptr);

}  // namespace bevodom
