#include "bevodom/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace bevodom {

namespace {

struct Entry {
  std::string description;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

double to_double(const std::string& s) {
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos])))
    ++pos;
  if (pos != s.size()) throw std::invalid_argument("trailing junk: " + s);
  return v;
}

int to_int(const std::string& s) {
  const double v = to_double(s);
  if (v != std::floor(v)) throw std::invalid_argument("not an integer: " + s);
  return static_cast<int>(v);
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  throw std::invalid_argument("not a boolean: " + s);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

using Registry = std::map<std::string, Entry>;

#define NUM_KEY(key, field, desc)                                       \
  {key,                                                                 \
   {desc,                                                               \
    [](RunConfig& c, const std::string& v) { c.field = to_double(v); }, \
    [](const RunConfig& c) { return fmt(c.field); }}}
#define INT_KEY(key, field, desc)                                    \
  {key,                                                              \
   {desc,                                                            \
    [](RunConfig& c, const std::string& v) { c.field = to_int(v); }, \
    [](const RunConfig& c) { return std::to_string(c.field); }}}
#define BOOL_KEY(key, field, desc)                                    \
  {key,                                                               \
   {desc,                                                             \
    [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }, \
    [](const RunConfig& c) { return c.field ? "true" : "false"; }}}
#define STR_KEY(key, field, desc)                               \
  {key,                                                         \
   {desc, [](RunConfig& c, const std::string& v) { c.field = v; }, \
    [](const RunConfig& c) { return c.field; }}}

const Registry& registry() {
  static const Registry reg = {
      {"seed",
       {"random seed for every seeded component",
        [](RunConfig& c, const std::string& v) {
          c.seed = static_cast<uint64_t>(std::stoull(v));
        },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      STR_KEY("mode", mode, "odometry | loop"),
      STR_KEY("dataset.dir", dataset_dir, "dataset directory"),
      STR_KEY("out.dir", out_dir, "output directory"),

      NUM_KEY("imu.sigma_g", imu_noise.sigma_g,
              "gyro white noise density [rad/s/sqrt(Hz)]"),
      NUM_KEY("imu.sigma_a", imu_noise.sigma_a,
              "accel white noise density [m/s^2/sqrt(Hz)]"),
      NUM_KEY("imu.sigma_bg", imu_noise.sigma_bg, "gyro bias random walk"),
      NUM_KEY("imu.sigma_ba", imu_noise.sigma_ba, "accel bias random walk"),
      NUM_KEY("imu.max_gap", imu_max_gap, "max tolerated IMU gap [s]"),
      NUM_KEY("imu.init_window", init_window,
              "static initialization window [s]"),

      NUM_KEY("extrinsics.tx", extrinsics.T_IL.p.x(), "LiDAR->IMU x [m]"),
      NUM_KEY("extrinsics.ty", extrinsics.T_IL.p.y(), "LiDAR->IMU y [m]"),
      NUM_KEY("extrinsics.tz", extrinsics.T_IL.p.z(), "LiDAR->IMU z [m]"),

      NUM_KEY("bev.mu", bev.mu, "BEV resolution [m/px]"),
      NUM_KEY("bev.x_max", bev.x_max, "half window extent along x [m]"),
      NUM_KEY("bev.y_max", bev.y_max, "half window extent along y [m]"),
      NUM_KEY("bev.voxel_leaf", bev.voxel_leaf,
              "downsample leaf size [m], 0 disables"),
      INT_KEY("bev.n_m", bev.n_m, "density normalization count"),
      BOOL_KEY("bev.per_frame_max", bev.per_frame_max,
               "normalize by the per-frame max count instead of n_m"),

      BOOL_KEY("features.enabled", features_enabled,
               "run the BEV feature channel"),
      NUM_KEY("features.fast_threshold", features.fast_threshold,
              "FAST contrast threshold [intensity]"),
      INT_KEY("features.fast_arc", features.fast_arc,
              "contiguous circle pixels for a corner"),
      INT_KEY("features.nms_radius", features.nms_radius,
              "non-maximum suppression radius [px]"),
      INT_KEY("features.max_keypoints", features.max_keypoints,
              "keypoint budget per frame"),
      INT_KEY("features.patch_radius", features.patch_radius,
              "descriptor patch half-size [px]"),
      NUM_KEY("features.match_ratio", features.match_ratio,
              "Lowe ratio threshold"),
      INT_KEY("features.ransac_max_iter", features.ransac_max_iter,
              "RANSAC iterations"),
      NUM_KEY("features.ransac_inlier_px", features.ransac_inlier_px,
              "RANSAC inlier threshold [px]"),
      INT_KEY("features.ransac_min_inliers", features.ransac_min_inliers,
              "minimum inliers for success"),
      STR_KEY("features.provider", provider,
              "descriptor provider: classic | ring | external"),
      STR_KEY("features.external_path", external_descriptors,
              "descriptor file for provider = external"),
      INT_KEY("features.vlad_clusters", vlad_clusters, "VLAD cluster count"),
      INT_KEY("features.vlad_training_frames", vlad_training_frames,
              "frames used to fit the VLAD codebook"),

      INT_KEY("registration.knn_k", registration.knn_k,
              "neighbors per plane fit"),
      NUM_KEY("registration.plane_thresh", registration.plane_thresh,
              "plane validity distance [m]"),
      NUM_KEY("registration.gate", registration.gate,
              "residual acceptance gate [m]"),
      NUM_KEY("registration.map_leaf", registration.map_leaf,
              "map down-filter leaf [m]"),

      NUM_KEY("fusion.lambda", fusion.lambda, "reprojection stack weight"),
      NUM_KEY("fusion.eta", fusion.eta, "projection Jacobian scale"),
      NUM_KEY("fusion.alpha_geo", fusion.alpha_geo,
              "geometric residual variance [m^2]"),
      NUM_KEY("fusion.alpha_proj", fusion.alpha_proj,
              "reprojection residual variance [px^2]"),
      NUM_KEY("fusion.reproj_gate_px", fusion.reproj_gate_px,
              "reprojection residual gate [px]"),
      INT_KEY("fusion.max_iter", fusion.max_iter, "iEKF iterations"),
      NUM_KEY("fusion.eps_conv", fusion.eps_conv,
              "iEKF convergence threshold"),

      NUM_KEY("keyframe.trans", keyframe_trans,
              "keyframe translation threshold [m]"),
      NUM_KEY("keyframe.rot_deg", keyframe_rot_deg,
              "keyframe rotation threshold [deg]"),

      INT_KEY("loop.k", loop.k, "retrieval candidates"),
      NUM_KEY("loop.tau", loop.tau, "pose distance gate [m]"),
      BOOL_KEY("loop.tau_gate_enabled", loop.tau_gate_enabled,
               "apply the pose-distance gate"),
      {"loop.min_gap",
       {"minimum keyframe id separation",
        [](RunConfig& c, const std::string& v) {
          c.loop.min_gap = to_int(v);
        },
        [](const RunConfig& c) { return std::to_string(c.loop.min_gap); }}},
      INT_KEY("loop.icp_max_iter", loop.icp_max_iter, "ICP iterations"),
      NUM_KEY("loop.icp_max_corr", loop.icp_max_corr,
              "ICP correspondence distance [m]"),
      NUM_KEY("loop.icp_rms_thresh", loop.icp_rms_thresh,
              "accept when inlier RMS below [m]"),
      NUM_KEY("loop.icp_min_inlier_frac", loop.icp_min_inlier_frac,
              "accept when inlier fraction above"),
      NUM_KEY("loop.noise_rot_sigma", loop.noise_rot_sigma,
              "loop factor rotation sigma [rad]"),
      NUM_KEY("loop.noise_trans_sigma", loop.noise_trans_sigma,
              "loop factor translation sigma [m]"),

      NUM_KEY("debug.inject_yaw_drift_deg_per_m", inject_yaw_drift_deg_per_m,
              "yaw drift injected into exported poses [deg/m], test hook"),

      INT_KEY("synth.beams", synth_lidar.beams, "synthetic LiDAR beams"),
      NUM_KEY("synth.elev_min_deg", synth_lidar.elev_min_deg,
              "lowest beam elevation [deg]"),
      NUM_KEY("synth.elev_max_deg", synth_lidar.elev_max_deg,
              "highest beam elevation [deg]"),
      INT_KEY("synth.azimuth_steps", synth_lidar.azimuth_steps,
              "azimuth steps per revolution"),
      NUM_KEY("synth.scan_period", synth_lidar.period, "scan period [s]"),
      NUM_KEY("synth.min_range", synth_lidar.min_range, "min range [m]"),
      NUM_KEY("synth.max_range", synth_lidar.max_range, "max range [m]"),
      NUM_KEY("synth.range_sigma", synth_lidar.range_sigma,
              "range noise sigma [m]"),
      NUM_KEY("synth.imu_rate", synth_imu.rate, "synthetic IMU rate [Hz]"),
      NUM_KEY("synth.imu_sigma_a", synth_imu.sigma_a,
              "per-sample accel noise [m/s^2]"),
      NUM_KEY("synth.imu_sigma_g", synth_imu.sigma_g,
              "per-sample gyro noise [rad/s]"),
      NUM_KEY("synth.imu_bias_az", synth_imu.bias_a.z(),
              "accel bias, z component [m/s^2]"),
      NUM_KEY("synth.imu_bias_ax", synth_imu.bias_a.x(),
              "accel bias, x component [m/s^2]"),
      NUM_KEY("synth.imu_bias_gz", synth_imu.bias_g.z(),
              "gyro bias, z component [rad/s]"),
  };
  return reg;
}

#undef NUM_KEY
#undef INT_KEY
#undef BOOL_KEY
#undef STR_KEY

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
  const auto it = registry().find(key);
  if (it == registry().end()) {
    throw std::runtime_error("unknown config key: " + key);
  }
  try {
    it->second.set(cfg, value);
  } catch (const std::exception& e) {
    throw std::runtime_error("bad value for " + key + ": " + e.what());
  }
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_override(cfg, key, value);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return cfg;
}

std::string config_reference() {
  const RunConfig defaults;
  std::ostringstream os;
  os << "# Configuration reference (key = default)  -- description\n";
  for (const auto& [key, entry] : registry()) {
    os << key << " = " << entry.get(defaults) << "  # "
       << entry.description << "\n";
  }
  return os.str();
}

}  // namespace bevodom
