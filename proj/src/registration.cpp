#include "bevodom/registration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace bevodom {

namespace {

// Worst candidate first: larger squared distance, then larger id.
bool heap_before(const std::pair<int, double>& a,
                 const std::pair<int, double>& b) {
  if (a.second != b.second) return a.second < b.second;
  return a.first < b.first;
}

void heap_push(std::vector<std::pair<int, double>>& heap, int k,
               std::pair<int, double> cand) {
  if (static_cast<int>(heap.size()) < k) {
    heap.push_back(cand);
    std::push_heap(heap.begin(), heap.end(), heap_before);
    return;
  }
  if (heap_before(cand, heap.front())) {
    std::pop_heap(heap.begin(), heap.end(), heap_before);
    heap.back() = cand;
    std::push_heap(heap.begin(), heap.end(), heap_before);
  }
}

int64_t voxel_key(const Vec3& p, double inv_leaf) {
  const auto cell = [](double c) {
    return static_cast<int64_t>(std::floor(c)) & 0x1fffff;
  };
  return (cell(p.x() * inv_leaf) << 42) | (cell(p.y() * inv_leaf) << 21) |
         cell(p.z() * inv_leaf);
}

}  // namespace

void KdTree3::build(std::vector<Vec3> pts) {
  pts_ = std::move(pts);
  nodes_.clear();
  nodes_.reserve(pts_.size());
  std::vector<int> ids(pts_.size());
  std::iota(ids.begin(), ids.end(), 0);
  root_ = pts_.empty() ? -1 : build_recursive(ids, 0);
}

int KdTree3::build_recursive(std::span<int> ids, int depth) {
  const int axis = depth % 3;
  const size_t mid = ids.size() / 2;
  std::nth_element(ids.begin(), ids.begin() + mid, ids.end(),
                   [&](int a, int b) {
                     if (pts_[a][axis] != pts_[b][axis])
                       return pts_[a][axis] < pts_[b][axis];
                     return a < b;
                   });
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.push_back({-1, -1, axis, ids[mid]});
  if (mid > 0) {
    nodes_[node_id].left = build_recursive(ids.first(mid), depth + 1);
  }
  if (mid + 1 < ids.size()) {
    nodes_[node_id].right =
        build_recursive(ids.subspan(mid + 1), depth + 1);
  }
  return node_id;
}

void KdTree3::search(int node_id, const Vec3& q, int k,
                     std::vector<std::pair<int, double>>& heap) const {
  const Node& node = nodes_[node_id];
  const Vec3& p = pts_[node.point_id];
  heap_push(heap, k, {node.point_id, (p - q).squaredNorm()});

  const double diff = q[node.axis] - p[node.axis];
  const int near = diff < 0.0 ? node.left : node.right;
  const int far = diff < 0.0 ? node.right : node.left;
  if (near >= 0) search(near, q, k, heap);
  const bool heap_full = static_cast<int>(heap.size()) >= k;
  if (far >= 0 && (!heap_full || diff * diff <= heap.front().second)) {
    search(far, q, k, heap);
  }
}

void KdTree3::knn(const Vec3& q, int k,
                  std::vector<std::pair<int, double>>& out) const {
  if (root_ < 0 || k <= 0) return;
  std::vector<std::pair<int, double>> heap;
  heap.reserve(k + 1);
  search(root_, q, k, heap);
  std::sort_heap(heap.begin(), heap.end(), heap_before);
  out.insert(out.end(), heap.begin(), heap.end());
}

int MapIndex::insert(std::span<const Vec3> pts) {
  const double inv_leaf = leaf_ > 0.0 ? 1.0 / leaf_ : 0.0;
  int added = 0;
  for (const Vec3& p : pts) {
    if (leaf_ > 0.0 && !occupied_.insert(voxel_key(p, inv_leaf)).second) {
      continue;
    }
    pts_.push_back(p);
    ++added;
  }
  const size_t pending = pts_.size() - tree_count_;
  if (tree_count_ == 0 || pending * 2 > tree_count_) {
    rebuild();
  }
  return added;
}

void MapIndex::rebuild() {
  tree_.build(pts_);
  tree_count_ = pts_.size();
}

void MapIndex::knn(const Vec3& q, int k,
                   std::vector<std::pair<int, double>>& out) const {
  out.clear();
  if (pts_.empty() || k <= 0) return;

  std::vector<std::pair<int, double>> merged;
  tree_.knn(q, k, merged);
  for (size_t id = tree_count_; id < pts_.size(); ++id) {
    merged.emplace_back(static_cast<int>(id), (pts_[id] - q).squaredNorm());
  }
  std::sort(merged.begin(), merged.end(), heap_before);
  const size_t n = std::min<size_t>(k, merged.size());
  out.assign(merged.begin(), merged.begin() + n);
}

PlaneFit fit_plane(std::span<const Vec3> pts, double dist_thresh) {
  PlaneFit fit;
  if (pts.size() < 3) return fit;

  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());

  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : pts) {
    const Vec3 d = p - centroid;
    cov += d * d.transpose();
  }

  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const Vec3 evals = eig.eigenvalues();  // ascending
  // Collinear or coincident points span less than a plane.
  if (evals[2] <= 0.0 || evals[1] < 1e-8 * evals[2]) {
    return fit;
  }
  fit.n = eig.eigenvectors().col(0).normalized();
  fit.d = -fit.n.dot(centroid);

  double mean = 0.0;
  bool within = true;
  for (const Vec3& p : pts) {
    const double r = std::abs(fit.n.dot(p) + fit.d);
    mean += r;
    within = within && r <= dist_thresh;
  }
  fit.mean_residual = mean / static_cast<double>(pts.size());
  fit.valid = within;
  return fit;
}

std::vector<GeoResidual> build_geo_residuals(std::span<const Vec3> scan_L,
                                             const NavState& x,
                                             const Pose3& T_IL,
                                             const MapIndex& map,
                                             const RegistrationConfig& cfg) {
  std::vector<GeoResidual> out;
  if (map.empty()) return out;
  out.reserve(scan_L.size());

  std::vector<std::pair<int, double>> nn;
  std::vector<Vec3> neighbors;
  for (const Vec3& p_L : scan_L) {
    const Vec3 p_I = T_IL * p_L;
    const Vec3 p_W = x.R_WI * p_I + x.p_WI;

    nn.clear();
    map.knn(p_W, cfg.knn_k, nn);
    if (static_cast<int>(nn.size()) < std::max(3, cfg.knn_k)) continue;

    neighbors.clear();
    for (const auto& [id, d2] : nn) neighbors.push_back(map.point(id));
    const PlaneFit plane = fit_plane(neighbors, cfg.plane_thresh);
    if (!plane.valid) continue;

    const double z = plane.n.dot(p_W) + plane.d;
    if (std::abs(z) >= cfg.gate) continue;

    GeoResidual res;
    res.z = z;
    res.p_world = p_W;
    // z = n . (R p_I + p) + d with right-multiplicative rotation error.
    res.H.block<1, 3>(0, err::kTheta) =
        -plane.n.transpose() * x.R_WI * skew(p_I);
    res.H.block<1, 3>(0, err::kPos) = plane.n.transpose();
    out.push_back(res);
  }
  return out;
}

}  // namespace bevodom
