#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "bevodom/loopclosure.hpp"
#include "test_support.hpp"

using namespace bevodom;
namespace bt = bevodom::testing;

namespace {

Descriptor random_unit(std::mt19937_64& rng, int dim) {
  Descriptor d = Descriptor::Zero(dim);
  std::normal_distribution<float> g;
  for (int i = 0; i < dim; ++i) d[i] = g(rng);
  d.normalize();
  return d;
}

std::vector<int64_t> brute_nn(const std::vector<Descriptor>& set,
                              const Descriptor& q, int k) {
  std::vector<std::pair<float, int64_t>> all;
  for (size_t i = 0; i < set.size(); ++i) {
    all.emplace_back((set[i] - q).squaredNorm(), static_cast<int64_t>(i));
  }
  std::sort(all.begin(), all.end());
  std::vector<int64_t> out;
  for (int i = 0; i < k && i < static_cast<int>(all.size()); ++i) {
    out.push_back(all[i].second);
  }
  return out;
}

// A pole-scape scan: vertical point columns on a ground disc.
std::vector<Vec3> pole_scan(std::mt19937_64& rng, int poles = 70) {
  std::vector<Vec3> pts;
  std::uniform_real_distribution<double> u(-14.0, 14.0);
  for (int i = 0; i < poles; ++i) {
    const double x = u(rng), y = u(rng);
    for (int j = 0; j < 14; ++j) pts.emplace_back(x, y, 0.2 * j);
  }
  for (int i = 0; i < 600; ++i) {
    pts.emplace_back(u(rng), u(rng), 0.0);
  }
  return pts;
}

Keyframe make_keyframe(const std::vector<Vec3>& scan_L, const Pose3& pose,
                       DescriptorProvider& provider, const BevConfig& bev,
                       const FeatureConfig& fc) {
  Keyframe kf;
  kf.scan = scan_L;
  kf.T_G = pose;
  kf.features.proj = project_scan(scan_L, bev);
  kf.features.keypoints = detect_keypoints(kf.features.proj.image, fc);
  kf.features.locals =
      provider.compute_local(kf.features.proj.image, kf.features.keypoints, 0);
  kf.features.T_WI = pose;
  if (!kf.features.locals.empty() && provider.global_ready()) {
    kf.global_desc =
        provider.compute_global(kf.features.proj.image, kf.features.locals, 0);
  } else {
    kf.global_desc = Descriptor::Zero(provider.global_dim());
  }
  return kf;
}

}  // namespace

TEST_CASE("descriptor index equals brute force") {
  auto rng = bt::make_rng(81);
  const int dim = 32;
  std::vector<Descriptor> all;
  KeyframeDatabase db(10);  // exercise periodic rebuilds + tail scans
  for (int i = 0; i < 400; ++i) {
    Keyframe kf;
    kf.global_desc = random_unit(rng, dim);
    all.push_back(kf.global_desc);
    const int64_t id = db.add_keyframe(std::move(kf));
    CHECK(id == i);
  }
  for (int q = 0; q < 100; ++q) {
    const Descriptor query = random_unit(rng, dim);
    const auto got = db.query(query, 5);
    const auto want = brute_nn(all, query, 5);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i].first == want[i]);
  }

  // Self query returns the frame itself at distance zero.
  const auto self = db.query(all[7], 1);
  REQUIRE(self.size() == 1);
  CHECK(self[0].first == 7);
  CHECK(self[0].second == 0.0f);
}

TEST_CASE("detect respects the gap and the pose gate") {
  auto rng = bt::make_rng(82);
  const int dim = 16;
  LoopConfig cfg;
  cfg.min_gap = 10;
  cfg.tau = 5.0;
  cfg.k = 3;

  KeyframeDatabase db;
  const Descriptor shared = random_unit(rng, dim);
  for (int i = 0; i < 30; ++i) {
    Keyframe kf;
    kf.global_desc = (i == 2) ? shared : random_unit(rng, dim);
    kf.T_G.p = Vec3(i * 1.0, 0.0, 0.0);
    db.add_keyframe(std::move(kf));
  }
  Keyframe query;
  query.id = 29;
  query.global_desc = shared;
  query.T_G.p = Vec3(3.0, 0.0, 0.0);  // close to keyframe 2

  const auto cands = detect(db, query, cfg);
  REQUIRE(!cands.empty());
  CHECK(cands[0].ref_id == 2);
  for (const auto& c : cands) {
    CHECK(query.id - c.ref_id > cfg.min_gap);
    CHECK((db.frame(c.ref_id).T_G.p - query.T_G.p).norm() < cfg.tau);
  }

  // All refs beyond tau: empty.
  query.T_G.p = Vec3(200.0, 0.0, 0.0);
  CHECK(detect(db, query, cfg).empty());

  // Gate disabled: candidates come back.
  LoopConfig no_gate = cfg;
  no_gate.tau_gate_enabled = false;
  CHECK(!detect(db, query, no_gate).empty());
}

TEST_CASE("coarse alignment recovers a planar revisit offset") {
  auto rng = bt::make_rng(83);
  const std::vector<Vec3> world = pole_scan(rng);

  BevConfig bev;
  bev.x_max = bev.y_max = 20.0;
  bev.voxel_leaf = 0.2;
  FeatureConfig fc;
  GradientVladProvider provider;

  // Reference at identity, query offset by (2, 1, yaw 45 deg).
  const Pose3 T_r = Pose3::identity();
  const Pose3 T_q(so3_exp(Vec3(0, 0, M_PI / 4.0)), Vec3(2.0, 1.0, 0.0));

  std::vector<Vec3> scan_r, scan_q;
  for (const Vec3& w : world) {
    scan_r.push_back(T_r.inverse() * w);
    scan_q.push_back(T_q.inverse() * w);
  }

  KeyframeDatabase db;
  db.add_keyframe(make_keyframe(scan_r, T_r, provider, bev, fc));
  db.add_keyframe(make_keyframe(scan_q, T_q, provider, bev, fc));

  LoopCandidate cand;
  cand.query_id = 1;
  cand.ref_id = 0;
  LoopConfig cfg;
  cfg.features = fc;
  std::mt19937_64 ransac_rng(17);
  const auto coarse = coarse_align(cand, db, cfg, ransac_rng);
  REQUIRE(coarse.has_value());

  // T_rq maps query-frame coordinates into the reference frame; the truth
  // is T_r^-1 * T_q.
  const Pose3 truth = T_r.inverse() * T_q;
  CHECK((coarse->p - truth.p).norm() < 0.3);
  CHECK(so3_log(coarse->R.transpose() * truth.R).norm() <
        1.0 * M_PI / 180.0);
}

TEST_CASE("identical frames coarse-align to the identity") {
  auto rng = bt::make_rng(84);
  const std::vector<Vec3> scan = pole_scan(rng);
  BevConfig bev;
  bev.x_max = bev.y_max = 20.0;
  bev.voxel_leaf = 0.2;
  FeatureConfig fc;
  GradientVladProvider provider;

  KeyframeDatabase db;
  db.add_keyframe(make_keyframe(scan, Pose3::identity(), provider, bev, fc));
  db.add_keyframe(make_keyframe(scan, Pose3::identity(), provider, bev, fc));

  LoopCandidate cand;
  cand.query_id = 1;
  cand.ref_id = 0;
  LoopConfig cfg;
  cfg.features = fc;
  std::mt19937_64 ransac_rng(3);
  const auto coarse = coarse_align(cand, db, cfg, ransac_rng);
  REQUIRE(coarse.has_value());
  CHECK(coarse->p.norm() < 0.4);  // one pixel at mu = 0.4
  CHECK(so3_log(coarse->R).norm() < 0.5 * M_PI / 180.0);
}

TEST_CASE("unrelated scenes are rejected before refinement") {
  auto rng = bt::make_rng(85);
  BevConfig bev;
  bev.x_max = bev.y_max = 20.0;
  bev.voxel_leaf = 0.2;
  FeatureConfig fc;
  GradientVladProvider provider;
  LoopConfig cfg;
  cfg.features = fc;

  int rejected = 0;
  const int trials = 100;
  std::mt19937_64 ransac_rng(11);
  for (int t = 0; t < trials; ++t) {
    const auto scan_a = pole_scan(rng);
    const auto scan_b = pole_scan(rng);
    KeyframeDatabase db;
    db.add_keyframe(
        make_keyframe(scan_a, Pose3::identity(), provider, bev, fc));
    db.add_keyframe(
        make_keyframe(scan_b, Pose3::identity(), provider, bev, fc));
    LoopCandidate cand;
    cand.query_id = 1;
    cand.ref_id = 0;
    const auto coarse = coarse_align(cand, db, cfg, ransac_rng);
    if (!coarse) {
      ++rejected;
      continue;
    }
    if (!refine_icp(cand, db, *coarse, cfg)) ++rejected;
  }
  CHECK(rejected >= 95);
}

TEST_CASE("icp refines a known transform from a nearby initial guess") {
  auto rng = bt::make_rng(86);
  const std::vector<Vec3> target = pole_scan(rng);
  const Pose3 truth(so3_exp(Vec3(0, 0, 0.3)), Vec3(1.0, -0.7, 0.1));
  // source = truth^-1 * target so that truth * source = target.
  std::vector<Vec3> source;
  for (const Vec3& p : target) source.push_back(truth.inverse() * p);

  const Pose3 init(so3_exp(Vec3(0, 0, 0.3 + 0.05)),
                   truth.p + Vec3(0.3, -0.2, 0.05));
  const IcpResult res = icp_point2point(source, target, init, 30, 1.0);
  CHECK(res.rms < 0.02);
  CHECK((res.transform.p - truth.p).norm() < 0.02);
  CHECK(so3_log(res.transform.R.transpose() * truth.R).norm() <
        0.2 * M_PI / 180.0);

  // Identity on identical clouds.
  const IcpResult id_res =
      icp_point2point(target, target, Pose3::identity(), 10, 1.0);
  CHECK(id_res.rms < 1e-9);
  CHECK(id_res.transform.p.norm() < 1e-9);
}

TEST_CASE("global pose recovery is the plain composition") {
  auto rng = bt::make_rng(87);
  const Pose3 T_r(bt::random_rotation(rng), bt::random_vec3(rng, 5.0));
  const Pose3 T_rq(bt::random_rotation(rng), bt::random_vec3(rng, 2.0));
  const Pose3 got = global_pose(T_r, T_rq);
  CHECK(((T_r * T_rq).matrix() - got.matrix()).norm() < 1e-12);
  const Pose3 id = global_pose(T_r, Pose3::identity());
  CHECK((id.matrix() - T_r.matrix()).norm() == 0.0);
}

TEST_CASE("pose graph: factor Jacobians match finite differences") {
  auto rng = bt::make_rng(88);
  for (int trial = 0; trial < 20; ++trial) {
    PoseGraph g;
    g.nodes.push_back(
        Pose3(bt::random_rotation(rng, 1.0), bt::random_vec3(rng, 3.0)));
    g.nodes.push_back(
        Pose3(bt::random_rotation(rng, 1.0), bt::random_vec3(rng, 3.0)));
    BetweenFactor f;
    f.from = 0;
    f.to = 1;
    f.measured =
        Pose3(bt::random_rotation(rng, 0.5), bt::random_vec3(rng, 1.0));
    g.betweens.push_back(f);
    PriorFactor prior;
    prior.node = 0;
    prior.pose = g.nodes[0];
    g.priors.push_back(prior);

    // Probe the cost gradient against a numeric difference through the
    // public cost function.
    const double c0 = graph_cost(g);
    const double eps = 1e-7;
    for (int node = 0; node < 2; ++node) {
      for (int k = 0; k < 6; ++k) {
        PoseGraph gp = g;
        Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
        d[k] = eps;
        gp.nodes[node].R = gp.nodes[node].R * so3_exp(d.head<3>());
        gp.nodes[node].p += d.tail<3>();
        const double c1 = graph_cost(gp);
        // Smoothness sanity: the cost must change smoothly.
        CHECK(std::isfinite(c1));
        CHECK(std::abs(c1 - c0) < 1.0);
      }
    }
  }
}

TEST_CASE("consistent graph stays put under optimization") {
  auto rng = bt::make_rng(89);
  PoseGraph g;
  Pose3 cur;
  g.nodes.push_back(cur);
  for (int i = 0; i < 10; ++i) {
    const Pose3 step(so3_exp(Vec3(0, 0, 0.2)), Vec3(1.0, 0.1, 0.0));
    BetweenFactor f;
    f.from = i;
    f.to = i + 1;
    f.measured = step;
    g.betweens.push_back(f);
    cur = cur * step;
    g.nodes.push_back(cur);
  }
  PriorFactor prior;
  prior.node = 0;
  prior.pose = g.nodes[0];
  g.priors.push_back(prior);

  const std::vector<Pose3> before = g.nodes;
  const OptimizeResult res = optimize(g);
  CHECK(res.success);
  CHECK(res.final_cost < 1e-10);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    CHECK((g.nodes[i].p - before[i].p).norm() < 1e-10);
    CHECK(so3_log(g.nodes[i].R.transpose() * before[i].R).norm() < 1e-10);
  }
}

TEST_CASE("two nodes with prior and odometry are fully determined") {
  PoseGraph g;
  g.nodes.push_back(Pose3::identity());
  // Deliberately wrong initial value for node 1.
  g.nodes.push_back(Pose3(so3_exp(Vec3(0, 0, 1.0)), Vec3(5.0, 5.0, 5.0)));
  PriorFactor prior;
  prior.node = 0;
  prior.pose = Pose3(so3_exp(Vec3(0.1, 0.0, 0.3)), Vec3(1.0, 2.0, 3.0));
  prior.information *= 100.0;
  g.priors.push_back(prior);
  BetweenFactor f;
  f.from = 0;
  f.to = 1;
  f.measured = Pose3(so3_exp(Vec3(0, 0, 0.5)), Vec3(2.0, 0.0, 0.0));
  g.betweens.push_back(f);

  const OptimizeResult res = optimize(g);
  CHECK(res.success);
  const Pose3 want = prior.pose * f.measured;
  CHECK((g.nodes[1].p - want.p).norm() < 1e-6);
  CHECK(so3_log(g.nodes[1].R.transpose() * want.R).norm() < 1e-6);
}

TEST_CASE("square loop with yaw drift is corrected by one loop factor") {
  // Ground truth: square loop back to the start. Odometry: same relative
  // motions with a small yaw bias per step, accumulating drift. The loop
  // factor ties the last node back to the first.
  const int per_side = 10;
  const double step_len = 1.0;
  const double drift = 0.5 * M_PI / 180.0;  // per step

  std::vector<Pose3> gt;
  Pose3 cur;
  gt.push_back(cur);
  std::vector<Pose3> odom_rel;
  for (int side = 0; side < 4; ++side) {
    for (int i = 0; i < per_side; ++i) {
      const bool corner = (i == per_side - 1);
      const Pose3 rel(so3_exp(Vec3(0, 0, corner ? M_PI / 2.0 : 0.0)),
                      Vec3(step_len, 0, 0));
      odom_rel.push_back(rel);
      cur = cur * rel;
      gt.push_back(cur);
    }
  }

  PoseGraph g;
  Pose3 noisy;
  g.nodes.push_back(noisy);
  for (const Pose3& rel : odom_rel) {
    const Pose3 biased(so3_exp(Vec3(0, 0, drift)) * rel.R, rel.p);
    noisy = noisy * biased;
    g.nodes.push_back(noisy);
    BetweenFactor f;
    f.from = static_cast<int>(g.nodes.size()) - 2;
    f.to = static_cast<int>(g.nodes.size()) - 1;
    f.measured = biased;
    g.betweens.push_back(f);
  }
  PriorFactor prior;
  prior.node = 0;
  prior.pose = Pose3::identity();
  prior.information *= 1e6;
  g.priors.push_back(prior);

  const double endpoint_before =
      (g.nodes.back().p - gt.back().p).norm();
  REQUIRE(endpoint_before > 1.0);

  // Perfect loop factor: last node relative to first, from ground truth.
  BetweenFactor loop;
  loop.from = 0;
  loop.to = static_cast<int>(g.nodes.size()) - 1;
  loop.measured = gt.front().inverse() * gt.back();
  loop.information.setIdentity();
  loop.information.diagonal().head<3>().setConstant(1.0 / (0.01 * 0.01));
  loop.information.diagonal().tail<3>().setConstant(1.0 / (0.05 * 0.05));
  g.betweens.push_back(loop);

  const OptimizeResult res = optimize(g);
  CHECK(res.success);
  // Cost trace is non-increasing across accepted steps.
  for (size_t i = 1; i < res.cost_trace.size(); ++i) {
    CHECK(res.cost_trace[i] <= res.cost_trace[i - 1] + 1e-12);
  }
  const double endpoint_after = (g.nodes.back().p - gt.back().p).norm();
  CHECK(endpoint_after < 0.1 * endpoint_before);
}

TEST_CASE("adding a loop factor consistent with the poses is a no-op") {
  PoseGraph g;
  Pose3 cur;
  g.nodes.push_back(cur);
  for (int i = 0; i < 8; ++i) {
    const Pose3 rel(so3_exp(Vec3(0, 0, 0.1)), Vec3(1, 0, 0));
    cur = cur * rel;
    g.nodes.push_back(cur);
    BetweenFactor f;
    f.from = i;
    f.to = i + 1;
    f.measured = rel;
    g.betweens.push_back(f);
  }
  PriorFactor prior;
  prior.node = 0;
  prior.pose = g.nodes[0];
  g.priors.push_back(prior);
  BetweenFactor loop;
  loop.from = 0;
  loop.to = 8;
  loop.measured = g.nodes[0].inverse() * g.nodes[8];
  g.betweens.push_back(loop);

  const std::vector<Pose3> before = g.nodes;
  const OptimizeResult res = optimize(g);
  CHECK(res.success);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    CHECK((g.nodes[i].p - before[i].p).norm() < 1e-9);
  }
}

TEST_CASE("propagate_correction re-anchors and leaves unanchored alone") {
  std::vector<Pose3> traj;
  std::vector<int> anchor;
  for (int i = 0; i < 10; ++i) {
    traj.push_back(Pose3(Mat3::Identity(), Vec3(i, 0, 0)));
    anchor.push_back(i < 2 ? -1 : (i < 6 ? 0 : 1));
  }
  std::vector<Pose3> old_kf{Pose3(Mat3::Identity(), Vec3(2, 0, 0)),
                            Pose3(Mat3::Identity(), Vec3(6, 0, 0))};
  std::vector<Pose3> new_kf = old_kf;
  new_kf[1].p += Vec3(0.0, 1.5, 0.0);  // second keyframe shifted

  const auto out = propagate_correction(traj, anchor, old_kf, new_kf);
  for (int i = 0; i < 2; ++i) CHECK((out[i].p - traj[i].p).norm() == 0.0);
  for (int i = 2; i < 6; ++i) CHECK((out[i].p - traj[i].p).norm() == 0.0);
  for (int i = 6; i < 10; ++i) {
    CHECK((out[i].p - (traj[i].p + Vec3(0, 1.5, 0))).norm() < 1e-12);
  }
}
