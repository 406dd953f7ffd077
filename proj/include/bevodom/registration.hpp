// World-frame point map with exact kNN, plane fitting, and the
// point-to-plane residual rows of the filter update.
#pragma once

#include <span>
#include <unordered_set>
#include <vector>

#include "bevodom/state.hpp"

namespace bevodom {

// Static exact kd-tree over 3-D points. Ties in distance are broken by
// insertion order (lower id wins), matching the brute-force oracle.
class KdTree3 {
 public:
  KdTree3() = default;
  explicit KdTree3(std::vector<Vec3> pts) { build(std::move(pts)); }

  void build(std::vector<Vec3> pts);
  size_t size() const { return pts_.size(); }
  const Vec3& point(int id) const { return pts_[id]; }
  const std::vector<Vec3>& points() const { return pts_; }

  // Appends up to k (id, squared distance) pairs, nearest first.
  void knn(const Vec3& q, int k,
           std::vector<std::pair<int, double>>& out) const;

 private:
  struct Node {
    int left = -1;
    int right = -1;
    int axis = 0;
    int point_id = -1;
  };

  int build_recursive(std::span<int> ids, int depth);
  void search(int node_id, const Vec3& q, int k,
              std::vector<std::pair<int, double>>& heap) const;

  std::vector<Vec3> pts_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Incremental map: a kd-tree over the bulk of the points plus a linear
// pending buffer; the tree is rebuilt once the pending share exceeds half
// of the tree size. Inserts pass a voxel occupancy down-filter so the map
// keeps at most one point per map_leaf voxel.
class MapIndex {
 public:
  explicit MapIndex(double map_leaf = 0.2) : leaf_(map_leaf) {}

  // Returns the number of points actually inserted.
  int insert(std::span<const Vec3> pts);
  size_t size() const { return pts_.size(); }
  bool empty() const { return pts_.empty(); }
  const Vec3& point(int id) const { return pts_[id]; }

  // Exact k nearest neighbors (all points when the map holds fewer than k).
  // Output pairs are (point id, squared distance), nearest first.
  void knn(const Vec3& q, int k,
           std::vector<std::pair<int, double>>& out) const;

 private:
  void rebuild();

  double leaf_;
  std::vector<Vec3> pts_;
  std::unordered_set<int64_t> occupied_;
  KdTree3 tree_;       // over pts_[0 .. tree_count_)
  size_t tree_count_ = 0;
};

struct PlaneFit {
  Vec3 n = Vec3::UnitZ();     // unit normal
  double d = 0.0;             // plane is n.x + d = 0
  bool valid = false;
  double mean_residual = 0.0;
};

// Least-squares plane through the centroid; invalid when the points are
// rank-deficient (collinear) or any point is farther than dist_thresh.
PlaneFit fit_plane(std::span<const Vec3> pts, double dist_thresh);

struct GeoResidual {
  double z = 0.0;                               // signed distance [m]
  Eigen::Matrix<double, 1, err::kDim> H =
      Eigen::Matrix<double, 1, err::kDim>::Zero();
  Vec3 p_world = Vec3::Zero();
};

struct RegistrationConfig {
  int knn_k = 5;
  double plane_thresh = 0.1;  // plane validity distance [m]
  double gate = 1.0;          // residual acceptance gate [m]
  double map_leaf = 0.2;      // map down-filter leaf [m]
};

// Point-to-plane rows for one scan (LiDAR-frame points) at state x.
// H is d z / d error-state with the layout from err::.
std::vector<GeoResidual> build_geo_residuals(std::span<const Vec3> scan_L,
                                             const NavState& x,
                                             const Pose3& T_IL,
                                             const MapIndex& map,
                                             const RegistrationConfig& cfg);

}  // namespace bevodom
