// Dataset file formats and ingestion.
//
// scans.bin, little-endian, one record per scan:
//   float64 scan end time [s], uint32 point count, then per point
//   float32 x, y, z [m] and float32 time offset [s] (<= 0, relative to
//   the scan end).
// imu.txt: one sample per line, "t ax ay az gx gy gz" (SI units).
// Trajectory files: one record per line, "t tx ty tz qx qy qz qw".
#pragma once

#include <string>
#include <vector>

#include "bevodom/imu.hpp"

namespace bevodom {

struct TrajectoryRecord {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();
};

struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_scans(const std::string& path, std::span<const RawScan> scans);
std::vector<RawScan> read_scans(const std::string& path);

void write_imu(const std::string& path, std::span<const ImuSample> samples);
std::vector<ImuSample> read_imu(const std::string& path);

void write_trajectory(const std::string& path,
                      std::span<const TrajectoryRecord> records);
std::vector<TrajectoryRecord> read_trajectory(const std::string& path);

struct Dataset {
  std::vector<RawScan> scans;
  std::vector<ImuSample> imu;
};

// Loads dir/scans.bin and dir/imu.txt and validates stream ordering.
// IMU data is mandatory; timestamp regressions are rejected.
Dataset ingest(const std::string& dir);

}  // namespace bevodom
