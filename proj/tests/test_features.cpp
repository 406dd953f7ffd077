#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "bevodom/features.hpp"
#include "test_support.hpp"

using namespace bevodom;
namespace bt = bevodom::testing;

namespace {

BevImage blank_image(int n) {
  BevImage img;
  img.width = img.height = n;
  img.cfg.mu = 0.4;
  img.cfg.x_max = img.cfg.y_max = 0.2 * n;
  img.intensity.assign(n * n, 0.0f);
  img.counts.assign(n * n, 0);
  return img;
}

void set_px(BevImage& img, int u, int v, float val) {
  img.intensity[v * img.width + u] = val;
  img.counts[v * img.width + u] = static_cast<int>(val * 10.0f);
}

// 90-degree counter-clockwise content rotation of a square image:
// out(u', v') = in(v', n-1-u').
BevImage rotate90(const BevImage& in) {
  BevImage out = in;
  const int n = in.width;
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      out.intensity[v * n + u] = in.intensity[(n - 1 - u) * n + v];
      out.counts[v * n + u] = in.counts[(n - 1 - u) * n + v];
    }
  }
  return out;
}

// Random dot constellation, bright saturated cells on a dark floor.
BevImage dot_image(int n, int dots, std::mt19937_64& rng,
                   float floor_level = 0.0f) {
  BevImage img = blank_image(n);
  if (floor_level > 0.0f) {
    std::fill(img.intensity.begin(), img.intensity.end(), floor_level);
  }
  std::uniform_int_distribution<int> pos(20, n - 21);
  for (int i = 0; i < dots; ++i) {
    const int u = pos(rng), v = pos(rng);
    set_px(img, u, v, 1.0f);
  }
  return img;
}

}  // namespace

TEST_CASE("uniform image has no keypoints") {
  BevImage img = blank_image(96);
  FeatureConfig cfg;
  CHECK(detect_keypoints(img, cfg).empty());
  std::fill(img.intensity.begin(), img.intensity.end(), 0.5f);
  CHECK(detect_keypoints(img, cfg).empty());
}

TEST_CASE("single bright cell yields exactly one keypoint") {
  BevImage img = blank_image(96);
  set_px(img, 48, 50, 1.0f);
  FeatureConfig cfg;
  const auto kps = detect_keypoints(img, cfg);
  REQUIRE(kps.size() == 1);
  CHECK(kps[0].u == 48.0);
  CHECK(kps[0].v == 50.0);
}

TEST_CASE("keypoints map under a 90 degree rotation") {
  auto rng = bt::make_rng(51);
  const int n = 128;
  BevImage img = dot_image(n, 40, rng);
  const BevImage rot = rotate90(img);

  FeatureConfig cfg;
  const auto kps_a = detect_keypoints(img, cfg);
  const auto kps_b = detect_keypoints(rot, cfg);
  REQUIRE(kps_a.size() > 10);

  int mapped = 0;
  for (const Keypoint& kp : kps_a) {
    // in(v', n-1-u') = out(u', v')  =>  u' = n-1-v, v' = u.
    const double u2 = n - 1 - kp.v, v2 = kp.u;
    for (const Keypoint& other : kps_b) {
      if (std::abs(other.u - u2) < 0.5 && std::abs(other.v - v2) < 0.5) {
        ++mapped;
        break;
      }
    }
  }
  CHECK(static_cast<double>(mapped) / kps_a.size() >= 0.95);
}

TEST_CASE("local descriptors are deterministic and unit norm") {
  auto rng = bt::make_rng(52);
  BevImage img = dot_image(128, 60, rng, 0.1f);
  FeatureConfig cfg;
  const auto kps = detect_keypoints(img, cfg);
  REQUIRE(!kps.empty());

  GradientVladProvider provider;
  const auto d1 = provider.compute_local(img, kps, 0);
  const auto d2 = provider.compute_local(img, kps, 0);
  REQUIRE(d1.size() == kps.size());
  for (size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1[i] == d2[i]);  // bitwise
    CHECK(std::abs(d1[i].norm() - 1.0f) < 1e-6f);
    CHECK(d1[i].allFinite());
    CHECK(d1[i].size() == provider.local_dim());
  }
}

TEST_CASE("local descriptor is robust to in-plane rotation") {
  // A distinctive asymmetric blob centered on the keypoint.
  const int n = 64;
  BevImage img = blank_image(n);
  const int c = 32;
  set_px(img, c, c, 1.0f);
  set_px(img, c + 1, c, 0.9f);
  set_px(img, c + 2, c, 0.7f);
  set_px(img, c, c + 1, 0.5f);
  set_px(img, c - 1, c - 2, 0.8f);
  set_px(img, c + 3, c + 2, 0.6f);

  const BevImage rot = rotate90(img);
  GradientVladProvider provider;
  const std::vector<Keypoint> kp_a{{double(c), double(c), 1.0f}};
  // The blob moves to (n-1-c, c) under the rotation convention used here.
  const std::vector<Keypoint> kp_b{{double(n - 1 - c), double(c), 1.0f}};
  const auto da = provider.compute_local(img, kp_a, 0);
  const auto db = provider.compute_local(rot, kp_b, 0);
  const float d_same = (da[0] - db[0]).norm();
  CHECK(d_same < 0.5f);

  // Distance to an unrelated patch is much larger.
  auto rng = bt::make_rng(53);
  BevImage other = dot_image(n, 25, rng);
  const std::vector<Keypoint> kp_o{{30.0, 28.0, 1.0f}};
  const auto dc = provider.compute_local(other, kp_o, 0);
  CHECK(d_same < (da[0] - dc[0]).norm());
}

TEST_CASE("global descriptor shape, determinism and rotation robustness") {
  auto rng = bt::make_rng(54);
  FeatureConfig cfg;

  // Twenty synthetic places plus a rotated copy of place 0.
  std::vector<BevImage> places;
  for (int i = 0; i < 20; ++i) places.push_back(dot_image(128, 45, rng));
  const BevImage rotated0 = rotate90(places[0]);

  GradientVladProvider provider(16);
  std::vector<std::vector<Keypoint>> kps;
  std::vector<std::vector<Descriptor>> locals;
  std::vector<Descriptor> training;
  for (const BevImage& img : places) {
    kps.push_back(detect_keypoints(img, cfg));
    locals.push_back(provider.compute_local(img, kps.back(), 0));
    training.insert(training.end(), locals.back().begin(),
                    locals.back().end());
  }
  provider.fit(training, 7);
  REQUIRE(provider.global_ready());

  std::vector<Descriptor> globals;
  for (size_t i = 0; i < places.size(); ++i) {
    globals.push_back(provider.compute_global(places[i], locals[i], 0));
    CHECK(globals.back().size() == provider.global_dim());
    CHECK(std::abs(globals.back().norm() - 1.0f) < 1e-5f);
  }

  // Same image twice: identical descriptor.
  const Descriptor again = provider.compute_global(places[0], locals[0], 0);
  CHECK((again - globals[0]).norm() == 0.0f);

  // Rotated copy of place 0 stays closer than half the median distance
  // to the other places.
  const auto kps_rot = detect_keypoints(rotated0, cfg);
  const auto locals_rot = provider.compute_local(rotated0, kps_rot, 0);
  const Descriptor g_rot = provider.compute_global(rotated0, locals_rot, 0);
  const float d_rot = (g_rot - globals[0]).norm();
  std::vector<float> d_others;
  for (size_t i = 1; i < globals.size(); ++i) {
    d_others.push_back((globals[i] - globals[0]).norm());
  }
  std::sort(d_others.begin(), d_others.end());
  const float median = d_others[d_others.size() / 2];
  CHECK(d_rot < 0.5f * median);
}

TEST_CASE("empty local set is an error for the global descriptor") {
  GradientVladProvider provider;
  provider.fit({}, 3);
  BevImage img = blank_image(64);
  CHECK_THROWS(provider.compute_global(img, {}, 0));
}

TEST_CASE("ring provider is rotation invariant and needs no fitting") {
  auto rng = bt::make_rng(55);
  RingDensityProvider provider;
  CHECK(provider.global_ready());
  BevImage img = dot_image(128, 40, rng);
  const BevImage rot = rotate90(img);
  const Descriptor a = provider.compute_global(img, {}, 0);
  const Descriptor b = provider.compute_global(rot, {}, 0);
  CHECK(a.size() == provider.global_dim());
  CHECK((a - b).norm() < 0.05f);
}

TEST_CASE("matching: identity, ratio rejection, mutual consistency") {
  auto rng = bt::make_rng(56);
  std::vector<Descriptor> a;
  for (int i = 0; i < 30; ++i) {
    Descriptor d = Descriptor::Zero(16);
    for (int k = 0; k < 16; ++k) {
      d[k] = std::uniform_real_distribution<float>(-1, 1)(rng);
    }
    d.normalize();
    a.push_back(d);
  }
  const MatchSet identity = match(a, a, 0.8);
  REQUIRE(identity.size() == a.size());
  for (const Match& m : identity) {
    CHECK(m.a == m.b);
    CHECK(m.distance == 0.0f);
  }

  // A near-duplicate second neighbor defeats the ratio test.
  std::vector<Descriptor> one{a[0]};
  Descriptor dup = a[0];
  dup[0] += 0.012f;
  dup.normalize();
  std::vector<Descriptor> two{a[0], dup};
  CHECK(match(one, two, 0.8).empty());
  // With only one candidate there is no ratio to fail.
  CHECK(match(one, {a[0]}, 0.8).size() == 1);
}

TEST_CASE("matches on a translated frame are consistent with the shift") {
  auto rng = bt::make_rng(57);
  const int n = 160;
  BevImage img = dot_image(n, 50, rng, 0.1f);
  const int du = 5, dv = -3;
  BevImage moved = blank_image(n);
  std::fill(moved.intensity.begin(), moved.intensity.end(), 0.1f);
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      const int uu = u + du, vv = v + dv;
      if (uu < 0 || uu >= n || vv < 0 || vv >= n) continue;
      if (img.intensity[v * n + u] > 0.5f) {
        moved.intensity[vv * n + uu] = img.intensity[v * n + u];
        moved.counts[vv * n + uu] = img.counts[v * n + u];
      }
    }
  }

  FeatureConfig cfg;
  GradientVladProvider provider;
  const auto kps_a = detect_keypoints(img, cfg);
  const auto kps_b = detect_keypoints(moved, cfg);
  const auto da = provider.compute_local(img, kps_a, 0);
  const auto db = provider.compute_local(moved, kps_b, 1);
  const MatchSet matches = match(da, db, 0.8);
  REQUIRE(matches.size() >= 10);

  int consistent = 0;
  for (const Match& m : matches) {
    const double eu = kps_b[m.b].u - kps_a[m.a].u - du;
    const double ev = kps_b[m.b].v - kps_a[m.a].v - dv;
    if (std::abs(eu) <= 1.0 && std::abs(ev) <= 1.0) ++consistent;
  }
  CHECK(static_cast<double>(consistent) / matches.size() >= 0.8);
}

TEST_CASE("ransac_rigid2 identity and exact two-point cases") {
  FeatureConfig cfg;
  cfg.ransac_min_inliers = 2;
  auto rng = bt::make_rng(58);
  std::mt19937_64 ransac_rng(99);

  std::vector<Vec2> pts;
  MatchSet matches;
  for (int i = 0; i < 20; ++i) {
    pts.push_back(Vec2(std::uniform_real_distribution<double>(0, 100)(rng),
                       std::uniform_real_distribution<double>(0, 100)(rng)));
    matches.push_back({i, i, 0.0f});
  }
  const auto est = ransac_rigid2(matches, pts, pts, cfg, ransac_rng);
  REQUIRE(est.ok);
  CHECK(est.inlier_count == 20);
  CHECK(std::abs(est.transform.theta) < 1e-9);
  CHECK(est.transform.t.norm() < 1e-9);

  // Two exact matches: the closed-form two-point solution.
  const Pose2 truth(0.7, Vec2(4.0, -2.0));
  std::vector<Vec2> a{Vec2(1.0, 2.0), Vec2(7.0, -1.0)};
  std::vector<Vec2> b{truth.act(a[0]), truth.act(a[1])};
  MatchSet two{{0, 0, 0.0f}, {1, 1, 0.0f}};
  const auto est2 = ransac_rigid2(two, a, b, cfg, ransac_rng);
  REQUIRE(est2.ok);
  CHECK(std::abs(wrap_angle(est2.transform.theta - truth.theta)) < 1e-9);
  CHECK((est2.transform.t - truth.t).norm() < 1e-9);
}

TEST_CASE("ransac_rigid2 recovers a transform under 50% outliers") {
  FeatureConfig cfg;
  auto rng = bt::make_rng(59);
  const Pose2 truth(30.0 * M_PI / 180.0, Vec2(5.0, -3.0));

  std::vector<Vec2> a, b;
  MatchSet matches;
  std::uniform_real_distribution<double> coord(0.0, 200.0);
  for (int i = 0; i < 60; ++i) {  // inliers
    const Vec2 p(coord(rng), coord(rng));
    a.push_back(p);
    b.push_back(truth.act(p));
    matches.push_back({i, i, 0.0f});
  }
  for (int i = 60; i < 120; ++i) {  // outliers
    a.push_back(Vec2(coord(rng), coord(rng)));
    b.push_back(Vec2(coord(rng), coord(rng)));
    matches.push_back({i, i, 0.0f});
  }
  std::mt19937_64 ransac_rng(7);
  const auto est = ransac_rigid2(matches, a, b, cfg, ransac_rng);
  REQUIRE(est.ok);
  CHECK(std::abs(wrap_angle(est.transform.theta - truth.theta)) <
        0.2 * M_PI / 180.0);
  CHECK((est.transform.t - truth.t).norm() < 0.3);
  CHECK(est.inlier_count >= 55);

  // Permuting the matches leaves the inlier set unchanged for a fixed
  // seed (canonical internal ordering).
  MatchSet shuffled = matches;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::mt19937_64 rng_a(7);
  const auto est_perm = ransac_rigid2(shuffled, a, b, cfg, rng_a);
  REQUIRE(est_perm.ok);
  std::set<std::pair<int, int>> in_orig, in_perm;
  for (size_t i = 0; i < matches.size(); ++i) {
    if (est.inlier_mask[i]) in_orig.insert({matches[i].a, matches[i].b});
  }
  for (size_t i = 0; i < shuffled.size(); ++i) {
    if (est_perm.inlier_mask[i]) in_perm.insert({shuffled[i].a, shuffled[i].b});
  }
  CHECK(in_orig == in_perm);
}

TEST_CASE("ransac failure below the inlier minimum") {
  FeatureConfig cfg;  // min inliers 8
  auto rng = bt::make_rng(60);
  std::vector<Vec2> a, b;
  MatchSet matches;
  std::uniform_real_distribution<double> coord(0.0, 100.0);
  for (int i = 0; i < 6; ++i) {
    a.push_back(Vec2(coord(rng), coord(rng)));
    b.push_back(Vec2(coord(rng), coord(rng)));
    matches.push_back({i, i, 0.0f});
  }
  std::mt19937_64 ransac_rng(5);
  CHECK(!ransac_rigid2(matches, a, b, cfg, ransac_rng).ok);
}

TEST_CASE("external descriptor file round trip") {
  auto rng = bt::make_rng(61);
  std::vector<std::tuple<int64_t, std::vector<Descriptor>, Descriptor>> recs;
  for (int64_t id : {0, 3, 7}) {
    std::vector<Descriptor> locals;
    for (int i = 0; i < 5; ++i) {
      Descriptor d = Descriptor::Zero(32);
      for (int k = 0; k < 32; ++k) {
        d[k] = std::uniform_real_distribution<float>(-1, 1)(rng);
      }
      locals.push_back(d);
    }
    Descriptor g = Descriptor::Zero(64);
    for (int k = 0; k < 64; ++k) {
      g[k] = std::uniform_real_distribution<float>(-1, 1)(rng);
    }
    recs.emplace_back(id, locals, g);
  }
  const std::string path = "/tmp/bevodom_desc_test.bin";
  write_external_descriptors(path, recs);

  ExternalFileProvider provider(path);
  CHECK(provider.local_dim() == 32);
  CHECK(provider.global_dim() == 64);
  BevImage img = blank_image(32);
  std::vector<Keypoint> kps(5);
  const auto locals = provider.compute_local(img, kps, 3);
  REQUIRE(locals.size() == 5);
  CHECK(locals[2] == std::get<1>(recs[1])[2]);
  const Descriptor g = provider.compute_global(img, locals, 7);
  CHECK(g == std::get<2>(recs[2]));
  CHECK_THROWS(provider.compute_local(img, kps, 42));
  std::filesystem::remove(path);
}
