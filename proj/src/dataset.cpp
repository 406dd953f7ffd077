#include "bevodom/dataset.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace bevodom {

namespace {

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T* value) {
  is.read(reinterpret_cast<char*>(value), sizeof(T));
  return static_cast<bool>(is);
}

}  // namespace

void write_scans(const std::string& path, std::span<const RawScan> scans) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  for (const RawScan& scan : scans) {
    write_pod(os, scan.end_time);
    write_pod(os, static_cast<uint32_t>(scan.points.size()));
    for (const TimedPoint& tp : scan.points) {
      write_pod(os, static_cast<float>(tp.p.x()));
      write_pod(os, static_cast<float>(tp.p.y()));
      write_pod(os, static_cast<float>(tp.p.z()));
      write_pod(os, static_cast<float>(tp.offset));
    }
  }
}

std::vector<RawScan> read_scans(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestError("cannot open " + path);
  std::vector<RawScan> scans;
  size_t record = 0;
  while (true) {
    double end_time = 0.0;
    if (!read_pod(is, &end_time)) break;
    uint32_t count = 0;
    if (!read_pod(is, &count) || count == 0) {
      throw IngestError(path + ": scan record " + std::to_string(record) +
                        " is malformed (empty or truncated)");
    }
    RawScan scan;
    scan.end_time = end_time;
    scan.points.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
      float x, y, z, offset;
      if (!read_pod(is, &x) || !read_pod(is, &y) || !read_pod(is, &z) ||
          !read_pod(is, &offset)) {
        throw IngestError(path + ": scan record " + std::to_string(record) +
                          " truncated at point " + std::to_string(i));
      }
      if (offset > 1e-6f) {
        throw IngestError(path + ": scan record " + std::to_string(record) +
                          " has a positive point offset");
      }
      scan.points[i] = {Vec3(x, y, z), offset};
    }
    scans.push_back(std::move(scan));
    ++record;
  }
  return scans;
}

void write_imu(const std::string& path, std::span<const ImuSample> samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  char line[256];
  for (const ImuSample& s : samples) {
    std::snprintf(line, sizeof(line),
                  "%.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", s.t, s.accel.x(),
                  s.accel.y(), s.accel.z(), s.gyro.x(), s.gyro.y(),
                  s.gyro.z());
    os << line;
  }
}

std::vector<ImuSample> read_imu(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestError("cannot open " + path);
  std::vector<ImuSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    ImuSample s;
    const int got = std::sscanf(line.c_str(), "%lf %lf %lf %lf %lf %lf %lf",
                                &s.t, &s.accel.x(), &s.accel.y(),
                                &s.accel.z(), &s.gyro.x(), &s.gyro.y(),
                                &s.gyro.z());
    if (got != 7) {
      throw IngestError(path + ":" + std::to_string(line_no) +
                        ": malformed IMU line");
    }
    samples.push_back(s);
  }
  return samples;
}

void write_trajectory(const std::string& path,
                      std::span<const TrajectoryRecord> records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  char line[320];
  for (const TrajectoryRecord& r : records) {
    std::snprintf(line, sizeof(line),
                  "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", r.t, r.p.x(),
                  r.p.y(), r.p.z(), r.q.x(), r.q.y(), r.q.z(), r.q.w());
    os << line;
  }
}

std::vector<TrajectoryRecord> read_trajectory(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IngestError("cannot open " + path);
  std::vector<TrajectoryRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    TrajectoryRecord r;
    double qx, qy, qz, qw;
    const int got = std::sscanf(line.c_str(),
                                "%lf %lf %lf %lf %lf %lf %lf %lf", &r.t,
                                &r.p.x(), &r.p.y(), &r.p.z(), &qx, &qy, &qz,
                                &qw);
    if (got != 8) {
      throw IngestError(path + ":" + std::to_string(line_no) +
                        ": malformed trajectory line");
    }
    r.q = Eigen::Quaterniond(qw, qx, qy, qz).normalized();
    records.push_back(r);
  }
  return records;
}

Dataset ingest(const std::string& dir) {
  Dataset data;
  data.scans = read_scans(dir + "/scans.bin");
  data.imu = read_imu(dir + "/imu.txt");
  if (data.imu.empty()) {
    throw IngestError(dir + "/imu.txt: IMU stream is empty (mandatory)");
  }
  if (data.scans.empty()) {
    throw IngestError(dir + "/scans.bin: no scans");
  }
  for (size_t i = 1; i < data.imu.size(); ++i) {
    if (data.imu[i].t <= data.imu[i - 1].t) {
      throw IngestError(dir + "/imu.txt: timestamp regression at sample " +
                        std::to_string(i));
    }
  }
  for (size_t i = 1; i < data.scans.size(); ++i) {
    if (data.scans[i].end_time <= data.scans[i - 1].end_time) {
      throw IngestError(dir + "/scans.bin: scan timestamps out of order at " +
                        std::to_string(i));
    }
  }
  return data;
}

}  // namespace bevodom
