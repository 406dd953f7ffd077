// Synthetic worlds: planar-wall/pole/ground primitives ray-cast along an
// analytic trajectory, with IMU samples taken from the exact derivatives.
#pragma once

#include <random>
#include <string>

#include "bevodom/imu.hpp"

namespace bevodom {

// Vertical wall quad between 2-D endpoints a and b, z in [z0, z1].
struct WallSegment {
  Vec2 a = Vec2::Zero();
  Vec2 b = Vec2::Zero();
  double z0 = 0.0;
  double z1 = 3.0;
};

// Vertical cylinder.
struct Pole {
  Vec2 c = Vec2::Zero();
  double radius = 0.1;
  double z0 = 0.0;
  double z1 = 3.0;
};

struct LidarModel {
  int beams = 16;
  double elev_min_deg = -15.0;
  double elev_max_deg = 7.5;
  int azimuth_steps = 512;
  double period = 0.1;       // seconds per revolution / scan
  double min_range = 0.8;
  double max_range = 45.0;
  double range_sigma = 0.0;  // additive range noise [m]
};

struct ImuModel {
  double rate = 200.0;
  double sigma_a = 0.01;   // per-sample accel noise [m/s^2]
  double sigma_g = 1e-3;   // per-sample gyro noise [rad/s]
  Vec3 bias_a = Vec3::Zero();
  Vec3 bias_g = Vec3::Zero();
};

// Piecewise-analytic planar path: holds, speed ramps, straights and arcs,
// tangent-continuous so the velocity never jumps. Yaw follows the tangent;
// roll and pitch stay zero.
class TrajectoryModel {
 public:
  TrajectoryModel() : TrajectoryModel(Vec2::Zero(), 0.0, 1.0) {}
  TrajectoryModel(const Vec2& start_xy, double start_yaw, double z);

  TrajectoryModel& hold(double duration);
  TrajectoryModel& ramp(double target_speed, double distance);
  TrajectoryModel& straight(double distance);
  TrajectoryModel& arc(double radius, double angle);  // signed, + is left

  double duration() const;

  struct Kinematics {
    Pose3 T_WI;
    Vec3 v_W = Vec3::Zero();
    Vec3 a_W = Vec3::Zero();
    double yaw_rate = 0.0;
  };
  Kinematics eval(double t) const;

 private:
  struct Segment {
    enum Kind { kHold, kRamp, kStraight, kArc } kind = kHold;
    double t_start = 0.0;
    double duration = 0.0;
    Vec2 p0 = Vec2::Zero();
    double yaw0 = 0.0;
    double v0 = 0.0;
    double accel = 0.0;   // ramp
    Vec2 center = Vec2::Zero();  // arc
    double radius = 0.0;
    double omega = 0.0;   // arc yaw rate
  };
  void append(Segment seg);

  double z_ = 1.0;
  Vec2 cursor_ = Vec2::Zero();
  double yaw_ = 0.0;
  double speed_ = 0.0;
  std::vector<Segment> segments_;
};

struct WorldSpec {
  std::string name = "world";
  std::vector<WallSegment> walls;
  std::vector<Pole> poles;
  bool ground = true;
  double ground_extent = 120.0;  // half-extent of the ground square [m]
  double bounds = 100.0;         // trajectory must stay inside +-bounds
  TrajectoryModel path;
  LidarModel lidar;
  ImuModel imu;
};

// Built-in layouts: "static", "corridor", "square", "urban".
// Seed controls layout jitter (pole placement), not the sensor noise.
WorldSpec make_preset(const std::string& name, uint64_t seed);

// First hit of a world primitive along a ray, or a negative value.
double cast_ray(const WorldSpec& world, const Vec3& origin, const Vec3& dir);

struct SyntheticDataset {
  std::vector<RawScan> scans;
  std::vector<ImuSample> imu;
  std::vector<std::pair<double, Pose3>> ground_truth;  // at scan end times
};

// Deterministic for a fixed spec and seed. Throws when the trajectory
// leaves the world bounds or any scan has fewer than 100 returns.
SyntheticDataset generate_synthetic(const WorldSpec& world, uint64_t seed);

// Writes scans.bin, imu.txt and gt.txt under dir (created if needed).
void write_dataset(const SyntheticDataset& data, const std::string& dir);

}  // namespace bevodom
