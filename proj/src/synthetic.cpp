#include "bevodom/synthetic.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "bevodom/dataset.hpp"

namespace bevodom {

namespace {
constexpr double kGravity = 9.81;
}

// ---------------------------------------------------------------------------
// TrajectoryModel

TrajectoryModel::TrajectoryModel(const Vec2& start_xy, double start_yaw,
                                 double z)
    : z_(z), cursor_(start_xy), yaw_(start_yaw) {}

void TrajectoryModel::append(Segment seg) {
  seg.t_start = duration();
  segments_.push_back(seg);
}

double TrajectoryModel::duration() const {
  if (segments_.empty()) return 0.0;
  return segments_.back().t_start + segments_.back().duration;
}

TrajectoryModel& TrajectoryModel::hold(double duration) {
  Segment seg;
  seg.kind = Segment::kHold;
  seg.duration = duration;
  seg.p0 = cursor_;
  seg.yaw0 = yaw_;
  append(seg);
  return *this;
}

TrajectoryModel& TrajectoryModel::ramp(double target_speed, double distance) {
  const double v0 = speed_, v1 = target_speed;
  if (distance <= 0.0 || v0 + v1 <= 0.0) {
    throw std::invalid_argument("ramp needs positive distance and speed");
  }
  Segment seg;
  seg.kind = Segment::kRamp;
  seg.duration = 2.0 * distance / (v0 + v1);
  seg.p0 = cursor_;
  seg.yaw0 = yaw_;
  seg.v0 = v0;
  seg.accel = (v1 - v0) / seg.duration;
  append(seg);
  cursor_ += distance * Vec2(std::cos(yaw_), std::sin(yaw_));
  speed_ = v1;
  return *this;
}

TrajectoryModel& TrajectoryModel::straight(double distance) {
  if (speed_ <= 0.0) {
    throw std::invalid_argument("straight segment needs nonzero speed");
  }
  Segment seg;
  seg.kind = Segment::kStraight;
  seg.duration = distance / speed_;
  seg.p0 = cursor_;
  seg.yaw0 = yaw_;
  seg.v0 = speed_;
  append(seg);
  cursor_ += distance * Vec2(std::cos(yaw_), std::sin(yaw_));
  return *this;
}

TrajectoryModel& TrajectoryModel::arc(double radius, double angle) {
  if (speed_ <= 0.0 || radius <= 0.0 || angle == 0.0) {
    throw std::invalid_argument("arc needs speed, radius and angle");
  }
  const double sign = angle > 0.0 ? 1.0 : -1.0;
  Segment seg;
  seg.kind = Segment::kArc;
  seg.duration = radius * std::abs(angle) / speed_;
  seg.p0 = cursor_;
  seg.yaw0 = yaw_;
  seg.v0 = speed_;
  seg.radius = radius;
  seg.omega = sign * speed_ / radius;
  seg.center =
      cursor_ + radius * Vec2(std::cos(yaw_ + sign * M_PI / 2.0),
                              std::sin(yaw_ + sign * M_PI / 2.0));
  append(seg);
  const double phi0 = yaw_ - sign * M_PI / 2.0;
  const double phi1 = phi0 + angle;
  cursor_ = seg.center + radius * Vec2(std::cos(phi1), std::sin(phi1));
  yaw_ = wrap_angle(yaw_ + angle);
  return *this;
}

TrajectoryModel::Kinematics TrajectoryModel::eval(double t) const {
  if (segments_.empty()) {
    Kinematics k;
    k.T_WI = Pose3(so3_exp(Vec3(0, 0, yaw_)),
                   Vec3(cursor_.x(), cursor_.y(), z_));
    return k;
  }
  t = std::clamp(t, 0.0, duration());
  size_t idx = 0;
  while (idx + 1 < segments_.size() &&
         t >= segments_[idx].t_start + segments_[idx].duration) {
    ++idx;
  }
  const Segment& s = segments_[idx];
  const double tau = std::clamp(t - s.t_start, 0.0, s.duration);

  Vec2 p = s.p0;
  Vec2 v = Vec2::Zero();
  Vec2 a = Vec2::Zero();
  double yaw = s.yaw0;
  double yaw_rate = 0.0;

  switch (s.kind) {
    case Segment::kHold:
      break;
    case Segment::kRamp: {
      const Vec2 dir(std::cos(s.yaw0), std::sin(s.yaw0));
      const double speed = s.v0 + s.accel * tau;
      p += dir * (s.v0 * tau + 0.5 * s.accel * tau * tau);
      v = dir * speed;
      a = dir * s.accel;
      break;
    }
    case Segment::kStraight: {
      const Vec2 dir(std::cos(s.yaw0), std::sin(s.yaw0));
      p += dir * (s.v0 * tau);
      v = dir * s.v0;
      break;
    }
    case Segment::kArc: {
      const double sign = s.omega > 0.0 ? 1.0 : -1.0;
      const double phi0 = s.yaw0 - sign * M_PI / 2.0;
      const double phi = phi0 + s.omega * tau;
      p = s.center + s.radius * Vec2(std::cos(phi), std::sin(phi));
      v = s.radius * s.omega * Vec2(-std::sin(phi), std::cos(phi));
      a = -s.radius * s.omega * s.omega * Vec2(std::cos(phi), std::sin(phi));
      yaw = s.yaw0 + s.omega * tau;
      yaw_rate = s.omega;
      break;
    }
  }

  Kinematics k;
  k.T_WI = Pose3(so3_exp(Vec3(0, 0, yaw)), Vec3(p.x(), p.y(), z_));
  k.v_W = Vec3(v.x(), v.y(), 0.0);
  k.a_W = Vec3(a.x(), a.y(), 0.0);
  k.yaw_rate = yaw_rate;
  return k;
}

// ---------------------------------------------------------------------------
// Ray casting

double cast_ray(const WorldSpec& world, const Vec3& origin, const Vec3& dir) {
  double best = -1.0;
  const auto consider = [&best](double s) {
    if (s > 1e-6 && (best < 0.0 || s < best)) best = s;
  };

  for (const WallSegment& w : world.walls) {
    const Vec2 edge = w.b - w.a;
    const Vec2 n(-edge.y(), edge.x());
    const double denom = n.x() * dir.x() + n.y() * dir.y();
    if (std::abs(denom) < 1e-12) continue;
    const double s =
        (n.x() * (w.a.x() - origin.x()) + n.y() * (w.a.y() - origin.y())) /
        denom;
    if (s <= 1e-6) continue;
    const Vec2 hit(origin.x() + s * dir.x(), origin.y() + s * dir.y());
    const double along = edge.dot(hit - w.a);
    if (along < 0.0 || along > edge.squaredNorm()) continue;
    const double z = origin.z() + s * dir.z();
    if (z < w.z0 || z > w.z1) continue;
    consider(s);
  }

  for (const Pole& pole : world.poles) {
    const Vec2 oc(origin.x() - pole.c.x(), origin.y() - pole.c.y());
    const Vec2 d2(dir.x(), dir.y());
    const double A = d2.squaredNorm();
    if (A < 1e-12) continue;
    const double B = 2.0 * oc.dot(d2);
    const double C = oc.squaredNorm() - pole.radius * pole.radius;
    const double disc = B * B - 4.0 * A * C;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    for (const double s : {(-B - sq) / (2.0 * A), (-B + sq) / (2.0 * A)}) {
      if (s <= 1e-6) continue;
      const double z = origin.z() + s * dir.z();
      if (z < pole.z0 || z > pole.z1) continue;
      consider(s);
      break;  // nearer root first
    }
  }

  if (world.ground && dir.z() < -1e-12) {
    const double s = -origin.z() / dir.z();
    const double x = origin.x() + s * dir.x();
    const double y = origin.y() + s * dir.y();
    if (std::abs(x) <= world.ground_extent &&
        std::abs(y) <= world.ground_extent) {
      consider(s);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Presets

namespace {

// Axis-aligned rectangle outline as four walls.
void add_box(std::vector<WallSegment>& walls, const Vec2& lo, const Vec2& hi,
             double z1) {
  walls.push_back({{lo.x(), lo.y()}, {hi.x(), lo.y()}, 0.0, z1});
  walls.push_back({{hi.x(), lo.y()}, {hi.x(), hi.y()}, 0.0, z1});
  walls.push_back({{hi.x(), hi.y()}, {lo.x(), hi.y()}, 0.0, z1});
  walls.push_back({{lo.x(), hi.y()}, {lo.x(), lo.y()}, 0.0, z1});
}

void scatter_poles(std::vector<Pole>& poles, std::mt19937_64& rng,
                   const Vec2& lo, const Vec2& hi, double spacing,
                   double jitter, double radius, double height) {
  std::uniform_real_distribution<double> jit(-jitter, jitter);
  for (double x = lo.x(); x <= hi.x(); x += spacing) {
    for (double y = lo.y(); y <= hi.y(); y += spacing) {
      poles.push_back({{x + jit(rng), y + jit(rng)}, radius, 0.0, height});
    }
  }
}

}  // namespace

WorldSpec make_preset(const std::string& name, uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  WorldSpec world;
  world.name = name;

  if (name == "static") {
    add_box(world.walls, {-12.0, -10.0}, {14.0, 11.0}, 3.5);
    world.poles.push_back({{4.0, 3.0}, 0.15, 0.0, 2.5});
    world.poles.push_back({{-5.0, 4.0}, 0.15, 0.0, 2.5});
    world.poles.push_back({{6.0, -4.0}, 0.15, 0.0, 2.5});
    world.path = TrajectoryModel({0.0, 0.0}, 0.3, 1.0);
    world.path.hold(8.0);
    world.lidar.max_range = 30.0;
    return world;
  }

  if (name == "corridor") {
    // Straight corridor along +x with side alcoves and poles for texture.
    add_box(world.walls, {-8.0, -4.0}, {60.0, 4.0}, 3.5);
    for (double x = 2.0; x < 55.0; x += 7.0) {
      world.walls.push_back({{x, -4.0}, {x, -3.0}, 0.0, 3.5});
      world.walls.push_back({{x + 3.5, 4.0}, {x + 3.5, 3.0}, 0.0, 3.5});
      world.poles.push_back({{x + 1.0, 2.6}, 0.12, 0.0, 2.8});
    }
    world.path = TrajectoryModel({0.0, 0.0}, 0.0, 1.0);
    world.path.hold(1.0).ramp(1.5, 2.0).straight(46.0);
    world.lidar.max_range = 35.0;
    return world;
  }

  if (name == "square") {
    // Square street between an inner block and an outer boundary wall; the
    // route loops around the block and overshoots the start.
    add_box(world.walls, {-10.0, -10.0}, {26.0, 26.0}, 4.0);   // inner block
    add_box(world.walls, {-24.0, -24.0}, {40.0, 40.0}, 4.0);   // outer wall
    std::vector<Vec2> corners = {{-17.0, -17.0}, {33.0, -17.0},
                                 {33.0, 33.0},  {-17.0, 33.0}};
    for (const Vec2& c : corners) {
      world.poles.push_back({{c.x() + 1.5, c.y()}, 0.15, 0.0, 3.2});
      world.poles.push_back({{c.x(), c.y() + 1.8}, 0.15, 0.0, 3.2});
    }
    std::uniform_real_distribution<double> jit(-0.8, 0.8);
    for (double s = -8.0; s <= 24.0; s += 6.5) {
      world.poles.push_back({{s + jit(rng), -14.2 + jit(rng)}, 0.14, 0.0, 3.0});
      world.poles.push_back({{30.2 + jit(rng), s + jit(rng)}, 0.14, 0.0, 3.0});
      world.poles.push_back({{s + jit(rng), 30.2 + jit(rng)}, 0.14, 0.0, 3.0});
      world.poles.push_back({{-14.2 + jit(rng), s + jit(rng)}, 0.14, 0.0, 3.0});
    }
    world.path = TrajectoryModel({-4.0, -17.0}, 0.0, 1.0);
    world.path.hold(1.0).ramp(1.6, 2.5);
    for (int lap = 0; lap < 1; ++lap) {
      world.path.straight(18.5).arc(3.0, M_PI / 2.0);
      world.path.straight(29.5).arc(3.0, M_PI / 2.0);
      world.path.straight(29.5).arc(3.0, M_PI / 2.0);
      world.path.straight(29.5).arc(3.0, M_PI / 2.0);
      world.path.straight(11.0);  // revisit the starting stretch
    }
    world.lidar.max_range = 30.0;
    return world;
  }

  if (name == "urban") {
    // Two city blocks, streets with poles, then an open plaza crossed on
    // the way back: only ground and thin poles are in range there.
    add_box(world.walls, {-26.0, 6.0}, {-6.0, 26.0}, 5.0);
    add_box(world.walls, {2.0, 6.0}, {22.0, 26.0}, 5.0);
    add_box(world.walls, {-26.0, -26.0}, {-6.0, -6.0}, 5.0);
    add_box(world.walls, {2.0, -26.0}, {22.0, -6.0}, 5.0);
    // Street furniture between the blocks.
    std::uniform_real_distribution<double> jit(-0.6, 0.6);
    for (double y = -24.0; y <= 24.0; y += 5.0) {
      world.poles.push_back({{-3.5 + jit(rng), y + jit(rng)}, 0.12, 0.0, 3.4});
      world.poles.push_back({{-0.5 + jit(rng), y + jit(rng)}, 0.12, 0.0, 3.4});
    }
    for (double x = -24.0; x <= 20.0; x += 5.0) {
      world.poles.push_back({{x + jit(rng), 2.5 + jit(rng)}, 0.12, 0.0, 3.4});
      world.poles.push_back({{x + jit(rng), -2.8 + jit(rng)}, 0.12, 0.0, 3.4});
    }
    // Plaza east of the blocks: thin poles only, jittered grid.
    scatter_poles(world.poles, rng, {30.0, -22.0}, {68.0, 22.0}, 5.5, 1.8,
                  0.05, 3.0);
    world.path = TrajectoryModel({-2.0, -22.0}, M_PI / 2.0, 1.0);
    world.path.hold(1.0).ramp(1.8, 2.5);
    world.path.straight(40.0);                 // north through the street
    world.path.arc(3.0, -M_PI / 2.0);          // east
    world.path.straight(25.0);                 // leave blocks, enter plaza
    world.path.arc(3.0, -M_PI / 2.0);          // south across the plaza
    world.path.straight(38.0);
    world.path.arc(3.0, -M_PI / 2.0);          // west, back toward blocks
    world.path.straight(25.0);
    world.path.arc(3.0, -M_PI / 2.0);          // north into the street again
    world.path.straight(12.0);
    world.lidar.max_range = 26.0;
    return world;
  }

  throw std::invalid_argument("unknown world preset: " + name);
}

// ---------------------------------------------------------------------------
// Dataset generation

SyntheticDataset generate_synthetic(const WorldSpec& world, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;

  const double duration = world.path.duration();
  if (duration <= world.lidar.period) {
    throw std::invalid_argument("trajectory too short");
  }

  SyntheticDataset data;
  const LidarModel& lidar = world.lidar;

  // IMU stream over the full duration.
  const double dt_imu = 1.0 / world.imu.rate;
  const Vec3 g_W(0.0, 0.0, -kGravity);
  for (double t = 0.0; t <= duration + 1e-9; t += dt_imu) {
    const auto k = world.path.eval(t);
    ImuSample s;
    s.t = t;
    const Vec3 noise_a(gauss(rng), gauss(rng), gauss(rng));
    const Vec3 noise_g(gauss(rng), gauss(rng), gauss(rng));
    s.accel = k.T_WI.R.transpose() * (k.a_W - g_W) + world.imu.bias_a +
              world.imu.sigma_a * noise_a;
    s.gyro = Vec3(0.0, 0.0, k.yaw_rate) + world.imu.bias_g +
             world.imu.sigma_g * noise_g;
    data.imu.push_back(s);
  }

  // Scans: one revolution per period, points timestamped over the sweep.
  const int n_scans = static_cast<int>(duration / lidar.period) - 1;
  const double bound = world.bounds;
  for (int si = 0; si < n_scans; ++si) {
    const double t_end = (si + 1) * lidar.period;
    RawScan scan;
    scan.end_time = t_end;
    for (int ai = 0; ai < lidar.azimuth_steps; ++ai) {
      const double offset =
          -lidar.period + (ai + 0.5) * lidar.period / lidar.azimuth_steps;
      const auto kin = world.path.eval(t_end + offset);
      if (std::abs(kin.T_WI.p.x()) > bound ||
          std::abs(kin.T_WI.p.y()) > bound) {
        throw std::runtime_error("trajectory leaves the world bounds");
      }
      const double azimuth = 2.0 * M_PI * ai / lidar.azimuth_steps;
      for (int bi = 0; bi < lidar.beams; ++bi) {
        const double elev_deg =
            lidar.beams == 1
                ? lidar.elev_min_deg
                : lidar.elev_min_deg + (lidar.elev_max_deg -
                                        lidar.elev_min_deg) *
                                           bi / (lidar.beams - 1);
        const double elev = elev_deg * M_PI / 180.0;
        const Vec3 dir_L(std::cos(elev) * std::cos(azimuth),
                         std::cos(elev) * std::sin(azimuth), std::sin(elev));
        const Vec3 dir_W = kin.T_WI.R * dir_L;
        const double s = cast_ray(world, kin.T_WI.p, dir_W);
        if (s < lidar.min_range || s > lidar.max_range) continue;
        const double s_noisy =
            lidar.range_sigma > 0.0 ? s + lidar.range_sigma * gauss(rng) : s;
        scan.points.push_back({s_noisy * dir_L, offset});
      }
    }
    if (scan.points.size() < 100) {
      throw std::runtime_error("scan " + std::to_string(si) +
                               " has fewer than 100 returns");
    }
    data.scans.push_back(std::move(scan));
    data.ground_truth.emplace_back(t_end, world.path.eval(t_end).T_WI);
  }
  return data;
}

void write_dataset(const SyntheticDataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_scans(dir + "/scans.bin", data.scans);
  write_imu(dir + "/imu.txt", data.imu);
  std::vector<TrajectoryRecord> gt;
  gt.reserve(data.ground_truth.size());
  for (const auto& [t, pose] : data.ground_truth) {
    TrajectoryRecord rec;
    rec.t = t;
    rec.p = pose.p;
    rec.q = Eigen::Quaterniond(pose.R).normalized();
    gt.push_back(rec);
  }
  write_trajectory(dir + "/gt.txt", gt);
}

}  // namespace bevodom
