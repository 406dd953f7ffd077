#include "bevodom/odometry.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace bevodom {

namespace {

using nlohmann::json;

std::unique_ptr<DescriptorProvider> make_provider(const RunConfig& cfg) {
  if (cfg.provider == "classic") {
    return std::make_unique<GradientVladProvider>(cfg.vlad_clusters,
                                                  cfg.features.patch_radius);
  }
  if (cfg.provider == "ring") {
    return std::make_unique<RingDensityProvider>(48,
                                                 cfg.features.patch_radius);
  }
  if (cfg.provider == "external") {
    return std::make_unique<ExternalFileProvider>(cfg.external_descriptors);
  }
  throw std::runtime_error("unknown descriptor provider: " + cfg.provider);
}

// Deterministic yaw drift accumulated along the estimated path, applied
// only to exported poses (the filter never sees it).
class DriftInjector {
 public:
  DriftInjector(double deg_per_m) : rate_(deg_per_m * M_PI / 180.0) {}

  Pose3 apply(const Pose3& pose) {
    if (rate_ == 0.0) return pose;
    if (has_prev_) {
      const double ds = (pose.p - prev_p_).norm();
      const double dpsi = rate_ * ds;
      // Rotate the world about the current (already drifted) position.
      const Pose3 here = drift_ * pose;
      const Pose3 twist(so3_exp(Vec3(0, 0, dpsi)),
                        here.p - so3_exp(Vec3(0, 0, dpsi)) * here.p);
      drift_ = twist * drift_;
    }
    prev_p_ = pose.p;
    has_prev_ = true;
    return drift_ * pose;
  }

 private:
  double rate_;
  Pose3 drift_;
  Vec3 prev_p_ = Vec3::Zero();
  bool has_prev_ = false;
};

struct BackendShared {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Keyframe> queue;
  bool done = false;

  // Published corrections.
  std::mutex pub_mu;
  int revision = 0;
  std::vector<Pose3> old_kf_poses;
  std::vector<Pose3> new_kf_poses;

  std::vector<LoopEvent> events;
  std::vector<std::vector<double>> cost_traces;
  int accepted = 0;
};

// Consumes keyframes in order, maintains the database and the pose graph,
// publishes optimized keyframe poses as monotone revisions.
void backend_main(const RunConfig& cfg, BackendShared* shared) {
  KeyframeDatabase db;
  std::vector<LoopConstraint> constraints;
  std::vector<Pose3> odom_poses;       // keyframe odometry poses
  std::vector<Covariance> odom_covs;
  std::mt19937_64 rng(cfg.seed ^ 0xb5297a4d3f8c2e1ull);

  while (true) {
    Keyframe kf;
    {
      std::unique_lock lock(shared->mu);
      shared->cv.wait(lock,
                      [&] { return shared->done || !shared->queue.empty(); });
      if (shared->queue.empty()) {
        if (shared->done) break;
        continue;
      }
      kf = std::move(shared->queue.front());
      shared->queue.pop_front();
    }

    odom_poses.push_back(kf.T_G);
    odom_covs.push_back(kf.odom_cov);
    const int64_t id = db.add_keyframe(std::move(kf));
    const Keyframe& query = db.frame(id);

    bool new_constraint = false;
    for (LoopCandidate cand : detect(db, query, cfg.loop)) {
      LoopEvent ev;
      ev.query_id = cand.query_id;
      ev.ref_id = cand.ref_id;
      ev.desc_distance = cand.desc_distance;
      ev.stage = "retrieved";
      const auto coarse = coarse_align(cand, db, cfg.loop, rng);
      ev.ransac_inliers = cand.ransac_inliers;
      if (!coarse) {
        ev.stage = "rejected";
        ev.reason = cand.reject_reason;
        shared->events.push_back(std::move(ev));
        continue;
      }
      ev.stage = "coarse";
      const auto constraint = refine_icp(cand, db, *coarse, cfg.loop);
      if (!constraint) {
        ev.stage = "rejected";
        ev.reason = cand.reject_reason;
        shared->events.push_back(std::move(ev));
        continue;
      }
      ev.stage = "refined";
      ev.icp_rms = constraint->icp_rms;
      ev.accepted = true;
      shared->events.push_back(std::move(ev));
      constraints.push_back(*constraint);
      ++shared->accepted;
      new_constraint = true;
    }

    if (!new_constraint) continue;

    // Rebuild the graph from the odometry poses and optimize.
    PoseGraph graph;
    graph.nodes = odom_poses;
    PriorFactor prior;
    prior.node = 0;
    prior.pose = odom_poses.front();
    prior.information.setIdentity();
    prior.information *= 1e6;
    graph.priors.push_back(prior);
    for (size_t i = 1; i < odom_poses.size(); ++i) {
      BetweenFactor f;
      f.from = static_cast<int>(i - 1);
      f.to = static_cast<int>(i);
      f.measured = odom_poses[i - 1].inverse() * odom_poses[i];
      f.information.setZero();
      for (int a = 0; a < 3; ++a) {
        const double s_rot =
            std::max(std::sqrt(odom_covs[i](err::kTheta + a,
                                            err::kTheta + a)),
                     1e-3);
        const double s_pos = std::max(
            std::sqrt(odom_covs[i](err::kPos + a, err::kPos + a)), 1e-3);
        f.information(a, a) = 1.0 / (s_rot * s_rot);
        f.information(3 + a, 3 + a) = 1.0 / (s_pos * s_pos);
      }
      graph.betweens.push_back(f);
    }
    const Pose3 T_IL = cfg.extrinsics.T_IL;
    for (const LoopConstraint& c : constraints) {
      BetweenFactor f;
      f.from = static_cast<int>(c.ref_id);
      f.to = static_cast<int>(c.query_id);
      // ICP aligns LiDAR clouds; express the constraint between body poses.
      f.measured = T_IL * c.T_rq * T_IL.inverse();
      f.information = c.information;
      graph.betweens.push_back(f);
    }

    const OptimizeResult opt = optimize(graph);
    shared->cost_traces.push_back(opt.cost_trace);
    if (!opt.success) continue;

    {
      std::lock_guard lock(shared->pub_mu);
      shared->old_kf_poses = odom_poses;
      shared->new_kf_poses = graph.nodes;
      ++shared->revision;
    }
    // Database poses follow the optimized estimate so later pose gates
    // and Eq-style global pose recovery use corrected values.
    for (size_t i = 0; i < graph.nodes.size(); ++i) {
      db.frame(static_cast<int64_t>(i)).T_G = graph.nodes[i];
    }
  }
}

struct PendingKeyframe {
  Keyframe kf;
};

RunResult run_impl(RunConfig cfg, const Dataset& data, bool with_loop,
                   std::ostream* diagnostics, std::ostream* loop_log) {
  if (data.imu.empty()) throw std::runtime_error("IMU stream is empty");
  if (data.scans.empty()) throw std::runtime_error("no scans");
  // Loop-stage matching uses the front-end feature parameters.
  cfg.loop.features = cfg.features;

  RunResult result;

  // --- Initialization: static window for gravity and gyro bias.
  const double t_first = data.imu.front().t;
  const double t_init_end = t_first + cfg.init_window;
  Vec3 mean_acc = Vec3::Zero(), mean_gyr = Vec3::Zero();
  int n_init = 0;
  for (const ImuSample& s : data.imu) {
    if (s.t > t_init_end) break;
    mean_acc += s.accel;
    mean_gyr += s.gyro;
    ++n_init;
  }
  if (n_init < 2) throw std::runtime_error("not enough IMU for init window");
  mean_acc /= n_init;
  mean_gyr /= n_init;

  NavState state;
  state.g_W = -mean_acc;  // world frame anchored to the initial body frame
  state.b_g = mean_gyr;
  Covariance P = Covariance::Identity() * 1e-4;
  P.block<3, 3>(err::kPos, err::kPos) = 1e-8 * Mat3::Identity();
  P.block<3, 3>(err::kBg, err::kBg) = 1e-6 * Mat3::Identity();

  const ImuPropagator propagator(cfg.imu_noise, cfg.imu_max_gap);
  const Pose3 T_IL = cfg.extrinsics.T_IL;
  MapIndex map(cfg.registration.map_leaf);

  // Feature channel state.
  std::unique_ptr<DescriptorProvider> provider;
  std::vector<Descriptor> vlad_training;
  std::vector<PendingKeyframe> pending_kfs;
  bool provider_fitted = false;
  if (cfg.features_enabled) provider = make_provider(cfg);
  std::mt19937_64 feature_rng(cfg.seed ^ 0x1234567fedcba987ull);

  FeatureFrame prev_frame;
  bool have_prev_frame = false;

  DriftInjector drift(cfg.inject_yaw_drift_deg_per_m);

  // Loop back-end.
  BackendShared shared;
  std::thread backend;
  if (with_loop) {
    backend = std::thread(backend_main, std::cref(cfg), &shared);
  }

  // Keyframe bookkeeping (front-end side).
  std::vector<Pose3> kf_export_poses;
  std::vector<int> traj_anchor;  // per trajectory record
  Pose3 last_kf_pose;
  bool have_kf = false;

  const auto fit_provider_now = [&]() {
    if (provider_fitted || !cfg.features_enabled) return;
    if (auto* vlad = dynamic_cast<GradientVladProvider*>(provider.get())) {
      vlad->fit(vlad_training, cfg.seed);
    }
    provider_fitted = true;
    for (PendingKeyframe& p : pending_kfs) {
      if (!p.kf.features.locals.empty()) {
        p.kf.global_desc = provider->compute_global(
            p.kf.features.proj.image, p.kf.features.locals, p.kf.id);
      } else {
        p.kf.global_desc = Descriptor::Zero(provider->global_dim());
      }
      if (with_loop) {
        std::lock_guard lock(shared.mu);
        shared.queue.push_back(std::move(p.kf));
        shared.cv.notify_one();
      }
      ++result.keyframes;
    }
    pending_kfs.clear();
  };
  const bool provider_needs_fit =
      cfg.features_enabled &&
      dynamic_cast<GradientVladProvider*>(provider.get()) != nullptr;
  if (cfg.features_enabled && !provider_needs_fit) provider_fitted = true;

  double prev_scan_time = 0.0;
  bool have_prev_scan = false;
  int frame_index = -1;

  for (const RawScan& raw : data.scans) {
    if (raw.end_time <= t_init_end) continue;  // platform assumed static
    ++frame_index;
    ++result.frames_total;
    const double t_scan = raw.end_time;

    json diag;
    diag["frame"] = frame_index;
    diag["t"] = t_scan;

    // --- Propagate.
    PoseBuffer buffer;
    if (have_prev_scan) {
      // Samples covering [prev, t_scan] with one extra on each side.
      std::vector<ImuSample> window;
      for (const ImuSample& s : data.imu) {
        if (s.t >= prev_scan_time - 0.05 && s.t <= t_scan + 0.05) {
          window.push_back(s);
        }
      }
      try {
        PropagationResult prop =
            propagator.propagate(state, P, window, prev_scan_time, t_scan);
        state = prop.state;
        P = prop.cov;
        buffer = std::move(prop.buffer);
      } catch (const PropagationGapError& e) {
        ++result.frames_skipped;
        diag["skipped"] = e.what();
        if (diagnostics) *diagnostics << diag.dump() << "\n";
        prev_scan_time = t_scan;
        continue;
      }
    } else {
      // First processed scan: static during the init window by contract.
      buffer.push(t_scan - 1.0, state.R_WI, state.p_WI);
      buffer.push(t_scan, state.R_WI, state.p_WI);
    }
    prev_scan_time = t_scan;
    have_prev_scan = true;

    // --- Undistort and downsample once; both channels share the cloud.
    int clamped = 0;
    const UndistortedScan und = undistort(raw, buffer, T_IL, &clamped);
    diag["clamped_points"] = clamped;
    std::vector<Vec3> ds = voxel_downsample(und.points, cfg.bev.voxel_leaf);

    // --- BEV projection + features.
    bool bev_ok = true;
    FeatureFrame frame;
    try {
      frame.proj = project_downsampled(std::move(ds), cfg.bev);
    } catch (const EmptyImageError&) {
      bev_ok = false;
    }
    if (!bev_ok) {
      ++result.frames_skipped;
      diag["skipped"] = "empty BEV image";
      if (diagnostics) *diagnostics << diag.dump() << "\n";
      continue;
    }
    // The projection consumed ds; keep using the copy inside the frame.
    const std::vector<Vec3>& scan_pts = frame.proj.points;

    bool channel_ok = false;
    MatchSet matches;
    std::vector<uint8_t> inlier_mask;
    if (cfg.features_enabled) {
      frame.keypoints = detect_keypoints(frame.proj.image, cfg.features);
      if (!frame.keypoints.empty()) {
        frame.locals = provider->compute_local(frame.proj.image,
                                               frame.keypoints, frame_index);
      }
      if (!provider_fitted) {
        vlad_training.insert(vlad_training.end(), frame.locals.begin(),
                             frame.locals.end());
        if (frame_index + 1 >= cfg.vlad_training_frames) fit_provider_now();
      }
      diag["keypoints"] = frame.keypoints.size();

      if (cfg.fusion.lambda != 0.0 && have_prev_frame &&
          !frame.locals.empty() && !prev_frame.locals.empty()) {
        matches =
            match(prev_frame.locals, frame.locals, cfg.features.match_ratio);
        if (matches.size() >= 2) {
          std::vector<Vec2> pts_a, pts_b;
          pts_a.reserve(prev_frame.keypoints.size());
          for (const Keypoint& kp : prev_frame.keypoints) {
            pts_a.emplace_back(kp.u, kp.v);
          }
          pts_b.reserve(frame.keypoints.size());
          for (const Keypoint& kp : frame.keypoints) {
            pts_b.emplace_back(kp.u, kp.v);
          }
          const Rigid2Estimate est = ransac_rigid2(
              matches, pts_a, pts_b, cfg.features, feature_rng);
          if (est.ok) {
            channel_ok = true;
            inlier_mask = est.inlier_mask;
            diag["matches"] = matches.size();
            diag["ransac_inliers"] = est.inlier_count;
          }
        }
      }
    }

    // --- Update.
    UpdateDiagnostics upd;
    if (!map.empty()) {
      const ResidualBuilder builder = [&](const NavState& x) {
        ResidualBundle bundle;
        bundle.geo = build_geo_residuals(scan_pts, x, T_IL, map,
                                         cfg.registration);
        if (channel_ok) {
          bundle.proj = build_reproj_residuals(prev_frame, frame, matches,
                                               inlier_mask, x, T_IL,
                                               cfg.fusion);
        }
        return bundle;
      };
      const UpdateResult res = iekf_update(state, P, builder, cfg.fusion,
                                           &upd);
      state = res.state;
      P = res.cov;
      if (upd.proj_count > 0) ++result.frames_feature_updates;
      diag["iters"] = upd.iterations;
      diag["geo"] = upd.geo_count;
      diag["proj"] = upd.proj_count;
      diag["rms_geo"] = upd.rms_geo;
      diag["rms_proj"] = upd.rms_proj;
      if (upd.diverged) diag["diverged"] = true;
    }

    // --- Map insertion at the updated pose.
    {
      const Pose3 T_WL = state.pose() * T_IL;
      std::vector<Vec3> world_pts;
      world_pts.reserve(scan_pts.size());
      for (const Vec3& p : scan_pts) world_pts.push_back(T_WL * p);
      map.insert(world_pts);
    }
    diag["map_size"] = map.size();

    // --- Trajectory export (+ optional injected drift).
    frame.T_WI = state.pose();
    const Pose3 export_pose = drift.apply(frame.T_WI);
    TrajectoryRecord rec;
    rec.t = t_scan;
    rec.p = export_pose.p;
    rec.q = Eigen::Quaterniond(export_pose.R).normalized();
    result.trajectory.push_back(rec);
    traj_anchor.push_back(static_cast<int>(kf_export_poses.size()) - 1);

    // --- Keyframe decision.
    bool make_kf = !have_kf;
    if (have_kf) {
      const double dist = (export_pose.p - last_kf_pose.p).norm();
      const double rot =
          so3_log(last_kf_pose.R.transpose() * export_pose.R).norm();
      make_kf = dist > cfg.keyframe_trans ||
                rot > cfg.keyframe_rot_deg * M_PI / 180.0;
    }
    if (make_kf && cfg.features_enabled) {
      Keyframe kf;
      kf.timestamp = t_scan;
      kf.scan = scan_pts;
      kf.T_G = export_pose;
      kf.features = frame;
      kf.odom_cov = P;
      kf.id = static_cast<int64_t>(kf_export_poses.size());
      kf_export_poses.push_back(export_pose);
      traj_anchor.back() = static_cast<int>(kf_export_poses.size()) - 1;
      last_kf_pose = export_pose;
      have_kf = true;

      if (provider_fitted) {
        if (!kf.features.locals.empty()) {
          kf.global_desc = provider->compute_global(kf.features.proj.image,
                                                    kf.features.locals,
                                                    frame_index);
        } else {
          kf.global_desc = Descriptor::Zero(provider->global_dim());
        }
        if (with_loop) {
          std::lock_guard lock(shared.mu);
          shared.queue.push_back(std::move(kf));
          shared.cv.notify_one();
        }
        ++result.keyframes;
      } else {
        pending_kfs.push_back({std::move(kf)});
      }
    }

    prev_frame = std::move(frame);
    have_prev_frame = true;
    if (diagnostics) *diagnostics << diag.dump() << "\n";
  }

  fit_provider_now();  // short runs: fit on whatever was collected

  if (result.frames_total > 0 &&
      result.frames_skipped * 10 > result.frames_total) {
    if (with_loop) {
      {
        std::lock_guard lock(shared.mu);
        shared.done = true;
      }
      shared.cv.notify_all();
      backend.join();
    }
    throw std::runtime_error("more than 10% of frames skipped (" +
                             std::to_string(result.frames_skipped) + "/" +
                             std::to_string(result.frames_total) + ")");
  }

  if (with_loop) {
    {
      std::lock_guard lock(shared.mu);
      shared.done = true;
    }
    shared.cv.notify_all();
    backend.join();

    result.loop_events = shared.events;
    result.accepted_loops = shared.accepted;
    result.trajectory_revision = shared.revision;
    result.lm_cost_traces = shared.cost_traces;

    if (shared.revision > 0) {
      std::vector<Pose3> traj_poses;
      traj_poses.reserve(result.trajectory.size());
      for (const TrajectoryRecord& r : result.trajectory) {
        traj_poses.emplace_back(r.q.toRotationMatrix(), r.p);
      }
      const std::vector<Pose3> corrected = propagate_correction(
          traj_poses, traj_anchor, shared.old_kf_poses, shared.new_kf_poses);
      result.corrected = result.trajectory;
      for (size_t i = 0; i < corrected.size(); ++i) {
        result.corrected[i].p = corrected[i].p;
        result.corrected[i].q =
            Eigen::Quaterniond(corrected[i].R).normalized();
      }
    } else {
      result.corrected = result.trajectory;
    }

    if (loop_log) {
      for (const LoopEvent& ev : result.loop_events) {
        json j;
        j["q"] = ev.query_id;
        j["r"] = ev.ref_id;
        j["desc_dist"] = ev.desc_distance;
        j["stage"] = ev.stage;
        if (!ev.reason.empty()) j["reason"] = ev.reason;
        j["ransac_inliers"] = ev.ransac_inliers;
        j["icp_rms"] = ev.icp_rms;
        j["accepted"] = ev.accepted;
        *loop_log << j.dump() << "\n";
      }
    }
  }

  return result;
}

}  // namespace

RunResult run_odometry(const RunConfig& cfg, const Dataset& data,
                       std::ostream* diagnostics) {
  return run_impl(cfg, data, false, diagnostics, nullptr);
}

RunResult run_with_loop(const RunConfig& cfg, const Dataset& data,
                        std::ostream* diagnostics, std::ostream* loop_log) {
  return run_impl(cfg, data, true, diagnostics, loop_log);
}

RunResult run(const RunConfig& cfg, const Dataset& data,
              std::ostream* diagnostics, std::ostream* loop_log) {
  if (cfg.mode == "loop") {
    return run_with_loop(cfg, data, diagnostics, loop_log);
  }
  if (cfg.mode == "odometry") {
    return run_odometry(cfg, data, diagnostics);
  }
  throw std::runtime_error("unknown mode: " + cfg.mode);
}

}  // namespace bevodom
