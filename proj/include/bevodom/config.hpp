// Run configuration: plain-text "key = value" files with dotted section
// prefixes, unknown keys rejected, every default documented via the
// generated reference.
#pragma once

#include <string>

#include "bevodom/bev.hpp"
#include "bevodom/features.hpp"
#include "bevodom/fusion.hpp"
#include "bevodom/loopclosure.hpp"
#include "bevodom/registration.hpp"
#include "bevodom/synthetic.hpp"

namespace bevodom {

struct RunConfig {
  uint64_t seed = 1;
  std::string mode = "odometry";  // odometry | loop
  std::string dataset_dir;
  std::string out_dir = "out";

  // IMU propagation
  ImuNoise imu_noise;
  double imu_max_gap = 0.05;      // [s]
  double init_window = 0.5;       // static gravity alignment window [s]

  Extrinsics extrinsics;          // T_IL, identity unless configured

  BevConfig bev;

  bool features_enabled = true;
  FeatureConfig features;
  std::string provider = "classic";  // classic | ring | external
  std::string external_descriptors;  // file for provider = external
  int vlad_clusters = 16;
  int vlad_training_frames = 10;

  RegistrationConfig registration;
  FusionConfig fusion;

  double keyframe_trans = 1.0;      // new keyframe beyond this motion [m]
  double keyframe_rot_deg = 10.0;   // or this rotation [deg]

  LoopConfig loop;

  // Test hook: deterministic yaw drift added to the exported odometry
  // (degrees per meter travelled); the filter itself is untouched.
  double inject_yaw_drift_deg_per_m = 0.0;

  // Synthetic generation overrides used by the synth subcommand.
  LidarModel synth_lidar;
  ImuModel synth_imu;
};

// Parses a config file. Unknown keys and malformed lines are errors.
RunConfig load_config(const std::string& path);

// Applies a single "key=value" override (CLI).
void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value);

// Human-readable reference of every key with its default.
std::string config_reference();

}  // namespace bevodom
