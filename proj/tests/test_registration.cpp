#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "bevodom/registration.hpp"
#include "test_support.hpp"

using namespace bevodom;
namespace bt = bevodom::testing;

namespace {

// Brute-force kNN with the same (distance, insertion order) tie break.
std::vector<std::pair<int, double>> brute_knn(const std::vector<Vec3>& pts,
                                              const Vec3& q, int k) {
  std::vector<std::pair<int, double>> all;
  all.reserve(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    all.emplace_back(static_cast<int>(i), (pts[i] - q).squaredNorm());
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(all.size()) > k) all.resize(k);
  return all;
}

}  // namespace

TEST_CASE("kNN trivial cases") {
  MapIndex map(0.0);
  std::vector<Vec3> one{Vec3(1.0, 2.0, 3.0)};
  map.insert(one);
  std::vector<std::pair<int, double>> out;
  map.knn(Vec3(0, 0, 0), 3, out);
  REQUIRE(out.size() == 1);
  CHECK(out[0].first == 0);

  // Grid map, query at a node.
  MapIndex grid(0.0);
  std::vector<Vec3> pts;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y) pts.emplace_back(x, y, 0.0);
  grid.insert(pts);
  grid.knn(Vec3(2.0, 3.0, 0.0), 1, out);
  REQUIRE(out.size() == 1);
  CHECK(out[0].second == 0.0);
  CHECK((grid.point(out[0].first) - Vec3(2.0, 3.0, 0.0)).norm() == 0.0);
}

TEST_CASE("kNN equals brute force through incremental inserts") {
  auto rng = bt::make_rng(41);
  MapIndex map(0.0);  // no down-filter: track every point
  std::vector<Vec3> reference;

  for (int batch = 0; batch < 10; ++batch) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 1000; ++i) pts.push_back(bt::random_vec3(rng, 50.0));
    map.insert(pts);
    reference.insert(reference.end(), pts.begin(), pts.end());

    for (int q = 0; q < 10; ++q) {
      const Vec3 query = bt::random_vec3(rng, 60.0);
      std::vector<std::pair<int, double>> got;
      map.knn(query, 5, got);
      const auto want = brute_knn(reference, query, 5);
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].first == want[i].first);
      }
    }
  }
}

TEST_CASE("map down-filter drops duplicates and is idempotent") {
  MapIndex map(0.2);
  std::vector<Vec3> pts;
  auto rng = bt::make_rng(42);
  for (int i = 0; i < 500; ++i) pts.push_back(bt::random_vec3(rng, 5.0));

  map.insert(pts);
  const size_t after_first = map.size();
  CHECK(after_first <= pts.size());
  map.insert(pts);  // exact duplicates: nothing new
  CHECK(map.size() == after_first);
}

TEST_CASE("fit_plane recovers exact and noisy planes") {
  std::vector<Vec3> flat{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                         {0.5, 0.5, 0}};
  const PlaneFit fit = fit_plane(flat, 0.1);
  CHECK(fit.valid);
  CHECK(std::abs(std::abs(fit.n.z()) - 1.0) < 1e-9);
  CHECK(std::abs(fit.d) < 1e-12);
  CHECK(fit.mean_residual < 1e-12);

  // Collinear points are degenerate.
  std::vector<Vec3> line{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {3, 3, 3},
                         {4, 4, 4}};
  CHECK(!fit_plane(line, 0.1).valid);

  // Noisy plane with a known normal.
  auto rng = bt::make_rng(43);
  std::normal_distribution<double> noise(0.0, 0.01);
  const Vec3 n_true = Vec3(0.3, -0.2, 0.93).normalized();
  const Mat3 basis =
      Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), n_true)
          .toRotationMatrix();
  std::vector<Vec3> noisy;
  for (int i = 0; i < 50; ++i) {
    const Vec3 local(std::uniform_real_distribution<double>(-1, 1)(rng),
                     std::uniform_real_distribution<double>(-1, 1)(rng),
                     noise(rng));
    noisy.push_back(basis * local);
  }
  const PlaneFit nf = fit_plane(noisy, 0.1);
  CHECK(nf.valid);
  const double angle =
      std::acos(std::min(1.0, std::abs(nf.n.dot(n_true))));
  CHECK(angle < 2.0 * M_PI / 180.0);
}

TEST_CASE("points too far from the plane invalidate the fit") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                        {0.5, 0.5, 0.5}};
  CHECK(!fit_plane(pts, 0.1).valid);
}

TEST_CASE("geo residuals vanish at the true pose") {
  // Map: three orthogonal planes sampled densely.
  std::vector<Vec3> map_pts;
  for (int i = 0; i < 40; ++i) {
    for (int j = 0; j < 40; ++j) {
      const double a = -5.0 + 0.25 * i, b = -5.0 + 0.25 * j;
      map_pts.emplace_back(a, b, 0.0);
      map_pts.emplace_back(a, 5.0, 1.0 + 0.1 * j);
      map_pts.emplace_back(5.0, b, 1.0 + 0.1 * i);
    }
  }
  MapIndex map(0.0);
  map.insert(map_pts);

  // Scan: a subset of the same points, expressed in the body frame of the
  // true pose.
  NavState x;
  x.R_WI = so3_exp(Vec3(0, 0, 0.4));
  x.p_WI = Vec3(0.5, -0.3, 0.2);
  std::vector<Vec3> scan;
  for (size_t i = 0; i < map_pts.size(); i += 7) {
    scan.push_back(x.R_WI.transpose() * (map_pts[i] - x.p_WI));
  }

  const RegistrationConfig cfg;
  const auto residuals =
      build_geo_residuals(scan, x, Pose3::identity(), map, cfg);
  REQUIRE(residuals.size() > 100);
  for (const GeoResidual& r : residuals) {
    CHECK(std::abs(r.z) < 1e-9);
  }
}

TEST_CASE("geo Jacobians match finite differences") {
  auto rng = bt::make_rng(44);
  std::vector<Vec3> map_pts;
  for (int i = 0; i < 2000; ++i) {
    Vec3 p = bt::random_vec3(rng, 8.0);
    p.z() = 0.01 * p.z();  // near-planar patch
    map_pts.push_back(p);
  }
  MapIndex map(0.0);
  map.insert(map_pts);

  const Pose3 T_IL(so3_exp(Vec3(0.05, -0.02, 0.4)), Vec3(0.1, 0.2, -0.05));
  RegistrationConfig cfg;
  cfg.gate = 5.0;
  cfg.plane_thresh = 0.2;

  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    NavState x;
    x.R_WI = bt::random_rotation(rng, 0.3);
    x.p_WI = bt::random_vec3(rng, 0.5);
    const Vec3 scan_pt = bt::random_vec3(rng, 4.0);
    std::vector<Vec3> scan{scan_pt};
    const auto residuals = build_geo_residuals(scan, x, T_IL, map, cfg);
    if (residuals.empty()) continue;
    ++checked;

    // The finite-difference oracle recomputes the signed distance to the
    // same (frozen) plane used by the residual.
    std::vector<std::pair<int, double>> nn;
    map.knn(x.R_WI * (T_IL * scan_pt) + x.p_WI, cfg.knn_k, nn);
    std::vector<Vec3> neigh;
    for (const auto& [id, d2] : nn) neigh.push_back(map.point(id));
    const PlaneFit plane = fit_plane(neigh, cfg.plane_thresh);
    REQUIRE(plane.valid);

    const auto fd = bt::fd_row(x, [&](const NavState& s) {
      return plane.n.dot(s.R_WI * (T_IL * scan_pt) + s.p_WI) + plane.d;
    });
    const double scale = std::max(1.0, fd.norm());
    CHECK((residuals[0].H - fd).norm() / scale < 1e-5);
  }
  CHECK(checked > 60);
}

TEST_CASE("pose offset along a wall normal shows up as the residual mean") {
  std::vector<Vec3> wall;
  for (int i = 0; i < 60; ++i) {
    for (int j = 0; j < 20; ++j) {
      wall.emplace_back(-6.0 + 0.2 * i, 3.0, 0.15 * j);
    }
  }
  MapIndex map(0.0);
  map.insert(wall);

  NavState truth;  // identity
  std::vector<Vec3> scan;
  for (size_t i = 0; i < wall.size(); i += 3) scan.push_back(wall[i]);

  NavState off = truth;
  off.p_WI = Vec3(0.0, 0.1, 0.0);  // toward the wall normal (y)
  RegistrationConfig cfg;
  const auto residuals =
      build_geo_residuals(scan, off, Pose3::identity(), map, cfg);
  REQUIRE(residuals.size() > 50);
  // Plane normals carry an arbitrary sign per fit; compare magnitudes.
  double mean = 0.0;
  for (const GeoResidual& r : residuals) mean += std::abs(r.z);
  mean /= residuals.size();
  CHECK(std::abs(mean - 0.1) < 0.02);
}
