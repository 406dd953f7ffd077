#include "bevodom/loopclosure.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace bevodom {

// ---------------------------------------------------------------------------
// KdTreeX

void KdTreeX::build(const std::vector<Descriptor>& vecs,
                    const std::vector<int64_t>& ids) {
  vecs_ = vecs;
  ids_ = ids;
  nodes_.clear();
  nodes_.reserve(vecs_.size());
  std::vector<int> idx(vecs_.size());
  std::iota(idx.begin(), idx.end(), 0);
  root_ = vecs_.empty() ? -1 : build_recursive(idx, 0);
}

int KdTreeX::build_recursive(std::span<int> idx, int depth) {
  const int dim = static_cast<int>(vecs_.front().size());
  const int axis = depth % dim;
  const size_t mid = idx.size() / 2;
  std::nth_element(idx.begin(), idx.begin() + mid, idx.end(),
                   [&](int a, int b) {
                     if (vecs_[a][axis] != vecs_[b][axis])
                       return vecs_[a][axis] < vecs_[b][axis];
                     return ids_[a] < ids_[b];
                   });
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.push_back({-1, -1, axis, idx[mid]});
  if (mid > 0) nodes_[node_id].left = build_recursive(idx.first(mid), depth + 1);
  if (mid + 1 < idx.size())
    nodes_[node_id].right = build_recursive(idx.subspan(mid + 1), depth + 1);
  return node_id;
}

namespace {

// Worst-first ordering for the bounded result heap: (distance, id).
bool desc_heap_before(const std::pair<float, int64_t>& a,
                      const std::pair<float, int64_t>& b) {
  if (a.first != b.first) return a.first < b.first;
  return a.second < b.second;
}

}  // namespace

void KdTreeX::search(int node, const Descriptor& q, int k,
                     const std::function<bool(int64_t)>& accept,
                     std::vector<std::pair<float, int64_t>>& heap) const {
  const Node& n = nodes_[node];
  const Descriptor& v = vecs_[n.vec_id];
  const int64_t id = ids_[n.vec_id];
  if (!accept || accept(id)) {
    const std::pair<float, int64_t> cand{(v - q).squaredNorm(), id};
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end(), desc_heap_before);
    } else if (desc_heap_before(cand, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), desc_heap_before);
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end(), desc_heap_before);
    }
  }
  const float diff = q[n.axis] - v[n.axis];
  const int near = diff < 0.0f ? n.left : n.right;
  const int far = diff < 0.0f ? n.right : n.left;
  if (near >= 0) search(near, q, k, accept, heap);
  const bool full = static_cast<int>(heap.size()) >= k;
  if (far >= 0 && (!full || diff * diff <= heap.front().first)) {
    search(far, q, k, accept, heap);
  }
}

std::vector<std::pair<int64_t, float>> KdTreeX::knn(
    const Descriptor& q, int k,
    const std::function<bool(int64_t)>& accept) const {
  std::vector<std::pair<int64_t, float>> out;
  if (root_ < 0 || k <= 0) return out;
  std::vector<std::pair<float, int64_t>> heap;
  heap.reserve(k + 1);
  search(root_, q, k, accept, heap);
  std::sort_heap(heap.begin(), heap.end(), desc_heap_before);
  out.reserve(heap.size());
  for (const auto& [d, id] : heap) out.emplace_back(id, d);
  return out;
}

// ---------------------------------------------------------------------------
// KeyframeDatabase

int64_t KeyframeDatabase::add_keyframe(Keyframe kf) {
  kf.id = static_cast<int64_t>(frames_.size());
  frames_.push_back(std::move(kf));
  if (frames_.size() - indexed_ >= static_cast<size_t>(rebuild_every_) ||
      indexed_ == 0) {
    std::vector<Descriptor> vecs;
    std::vector<int64_t> ids;
    vecs.reserve(frames_.size());
    for (const Keyframe& f : frames_) {
      vecs.push_back(f.global_desc);
      ids.push_back(f.id);
    }
    index_.build(vecs, ids);
    indexed_ = frames_.size();
  }
  return frames_.back().id;
}

std::vector<std::pair<int64_t, float>> KeyframeDatabase::query(
    const Descriptor& q, int k,
    const std::function<bool(int64_t)>& accept) const {
  auto result = index_.knn(q, k, accept);
  // Linear scan over the un-indexed tail.
  for (size_t i = indexed_; i < frames_.size(); ++i) {
    const Keyframe& f = frames_[i];
    if (accept && !accept(f.id)) continue;
    result.emplace_back(f.id, (f.global_desc - q).squaredNorm());
  }
  std::sort(result.begin(), result.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(result.size()) > k) result.resize(k);
  return result;
}

// ---------------------------------------------------------------------------
// Loop pipeline stages

std::vector<LoopCandidate> detect(const KeyframeDatabase& db,
                                  const Keyframe& query,
                                  const LoopConfig& cfg) {
  std::vector<LoopCandidate> out;
  const auto eligible = [&](int64_t id) {
    return query.id - id > cfg.min_gap;
  };
  const auto hits = db.query(query.global_desc, cfg.k, eligible);
  for (const auto& [id, d2] : hits) {
    LoopCandidate cand;
    cand.query_id = query.id;
    cand.ref_id = id;
    cand.desc_distance = std::sqrt(std::max(d2, 0.0f));
    if (cfg.tau_gate_enabled) {
      const double pose_dist =
          (db.frame(id).T_G.p - query.T_G.p).norm();
      if (pose_dist >= cfg.tau) continue;
    }
    out.push_back(cand);
  }
  return out;
}

std::optional<Pose3> coarse_align(LoopCandidate& cand,
                                  const KeyframeDatabase& db,
                                  const LoopConfig& cfg,
                                  std::mt19937_64& rng) {
  const Keyframe& query = db.frame(cand.query_id);
  const Keyframe& ref = db.frame(cand.ref_id);
  const MatchSet matches = match(query.features.locals, ref.features.locals,
                                 cfg.features.match_ratio);
  if (matches.size() < 2) {
    cand.stage = LoopStage::kRejected;
    cand.reject_reason = "too few matches";
    return std::nullopt;
  }
  // Centered pixel coordinates make the lift need only the resolution.
  const Vec2 c_q = query.features.proj.image.center();
  const Vec2 c_r = ref.features.proj.image.center();
  std::vector<Vec2> pts_q, pts_r;
  pts_q.reserve(query.features.keypoints.size());
  for (const Keypoint& kp : query.features.keypoints) {
    pts_q.push_back(Vec2(kp.u, kp.v) - c_q);
  }
  pts_r.reserve(ref.features.keypoints.size());
  for (const Keypoint& kp : ref.features.keypoints) {
    pts_r.push_back(Vec2(kp.u, kp.v) - c_r);
  }
  const Rigid2Estimate est =
      ransac_rigid2(matches, pts_q, pts_r, cfg.features, rng);
  cand.ransac_inliers = est.inlier_count;
  if (!est.ok) {
    cand.stage = LoopStage::kRejected;
    cand.reject_reason = "ransac failed";
    return std::nullopt;
  }
  cand.stage = LoopStage::kCoarseAligned;
  // The pixel model maps query pixels onto reference pixels, so the lift
  // is directly T_rq (query-frame coordinates into the reference frame).
  cand.T_rq_coarse =
      pose2_to_pose3(est.transform, query.features.proj.image.cfg.mu);
  return cand.T_rq_coarse;
}

IcpResult icp_point2point(std::span<const Vec3> source,
                          std::span<const Vec3> target, const Pose3& T_init,
                          int max_iter, double max_corr) {
  IcpResult out;
  out.transform = T_init;
  if (source.empty() || target.empty()) return out;

  KdTree3 tree{std::vector<Vec3>(target.begin(), target.end())};
  const double max_corr2 = max_corr * max_corr;

  std::vector<std::pair<int, double>> nn;
  for (int iter = 0; iter < max_iter; ++iter) {
    out.iterations = iter + 1;
    Vec3 c_src = Vec3::Zero(), c_tgt = Vec3::Zero();
    std::vector<std::pair<Vec3, Vec3>> pairs;
    pairs.reserve(source.size());
    double err = 0.0;
    for (const Vec3& p : source) {
      const Vec3 q = out.transform * p;
      nn.clear();
      tree.knn(q, 1, nn);
      if (nn.empty() || nn.front().second > max_corr2) continue;
      const Vec3& t = tree.point(nn.front().first);
      pairs.emplace_back(q, t);
      c_src += q;
      c_tgt += t;
      err += nn.front().second;
    }
    out.inlier_fraction =
        static_cast<double>(pairs.size()) / static_cast<double>(source.size());
    if (pairs.size() < 3) {
      out.rms = std::numeric_limits<double>::infinity();
      return out;
    }
    out.rms = std::sqrt(err / pairs.size());
    c_src /= static_cast<double>(pairs.size());
    c_tgt /= static_cast<double>(pairs.size());

    Mat3 W = Mat3::Zero();
    for (const auto& [s, t] : pairs) {
      W += (t - c_tgt) * (s - c_src).transpose();
    }
    Eigen::JacobiSVD<Mat3> svd(W, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 D = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
      D(2, 2) = -1.0;
    }
    const Mat3 R_step = svd.matrixU() * D * svd.matrixV().transpose();
    const Vec3 t_step = c_tgt - R_step * c_src;

    out.transform = Pose3(R_step, t_step) * out.transform;
    if (so3_log(R_step).norm() < 1e-8 && t_step.norm() < 1e-8) {
      out.converged = true;
      break;
    }
  }
  return out;
}

std::optional<LoopConstraint> refine_icp(LoopCandidate& cand,
                                         const KeyframeDatabase& db,
                                         const Pose3& T_init,
                                         const LoopConfig& cfg) {
  const Keyframe& query = db.frame(cand.query_id);
  const Keyframe& ref = db.frame(cand.ref_id);
  const IcpResult icp =
      icp_point2point(query.scan, ref.scan, T_init, cfg.icp_max_iter,
                      cfg.icp_max_corr);
  if (!(icp.rms < cfg.icp_rms_thresh) ||
      !(icp.inlier_fraction > cfg.icp_min_inlier_frac)) {
    cand.stage = LoopStage::kRejected;
    cand.reject_reason = "icp fitness";
    return std::nullopt;
  }
  cand.stage = LoopStage::kRefined;

  LoopConstraint constraint;
  constraint.ref_id = cand.ref_id;
  constraint.query_id = cand.query_id;
  constraint.T_rq = icp.transform;
  constraint.icp_rms = icp.rms;
  // Diagonal noise inflated by the achieved fit quality.
  const double scale = 1.0 + icp.rms / cfg.icp_rms_thresh;
  const double rot_var = std::pow(cfg.noise_rot_sigma * scale, 2);
  const double trans_var = std::pow(cfg.noise_trans_sigma * scale, 2);
  constraint.information.setZero();
  constraint.information.diagonal().head<3>().setConstant(1.0 / rot_var);
  constraint.information.diagonal().tail<3>().setConstant(1.0 / trans_var);
  return constraint;
}

Pose3 global_pose(const Pose3& T_G_r, const Pose3& T_rq) {
  return T_G_r * T_rq;
}

// ---------------------------------------------------------------------------
// Pose graph optimization

namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Residual [rot; trans] of a between factor and its Jacobians w.r.t. the
// right-multiplicative perturbations of both nodes.
Vec6 between_residual(const Pose3& Ti, const Pose3& Tj, const Pose3& meas,
                      Mat6* J_i, Mat6* J_j) {
  const Mat3 R_rel = Ti.R.transpose() * Tj.R;
  const Vec3 p_rel = Ti.R.transpose() * (Tj.p - Ti.p);
  const Mat3 E = meas.R.transpose() * R_rel;
  Vec6 r;
  r.head<3>() = so3_log(E);
  r.tail<3>() = p_rel - meas.p;
  if (J_i || J_j) {
    const Mat3 Jr_inv = so3_right_jacobian_inv(r.head<3>());
    if (J_i) {
      J_i->setZero();
      J_i->block<3, 3>(0, 0) = -Jr_inv * R_rel.transpose();
      J_i->block<3, 3>(3, 0) = skew(p_rel);
      J_i->block<3, 3>(3, 3) = -Ti.R.transpose();
    }
    if (J_j) {
      J_j->setZero();
      J_j->block<3, 3>(0, 0) = Jr_inv;
      J_j->block<3, 3>(3, 3) = Ti.R.transpose();
    }
  }
  return r;
}

Vec6 prior_residual(const Pose3& T, const Pose3& meas, Mat6* J) {
  const Mat3 E = meas.R.transpose() * T.R;
  Vec6 r;
  r.head<3>() = so3_log(E);
  r.tail<3>() = T.p - meas.p;
  if (J) {
    J->setZero();
    J->block<3, 3>(0, 0) = so3_right_jacobian_inv(r.head<3>());
    J->block<3, 3>(3, 3) = Mat3::Identity();
  }
  return r;
}

double cost_of(const std::vector<Pose3>& nodes, const PoseGraph& g) {
  double cost = 0.0;
  for (const PriorFactor& f : g.priors) {
    const Vec6 r = prior_residual(nodes[f.node], f.pose, nullptr);
    cost += r.dot(f.information * r);
  }
  for (const BetweenFactor& f : g.betweens) {
    const Vec6 r =
        between_residual(nodes[f.from], nodes[f.to], f.measured, nullptr,
                         nullptr);
    cost += r.dot(f.information * r);
  }
  return cost;
}

}  // namespace

double graph_cost(const PoseGraph& graph) {
  return cost_of(graph.nodes, graph);
}

OptimizeResult optimize(PoseGraph& graph, int max_iter, double rel_tol) {
  OptimizeResult out;
  const int n = static_cast<int>(graph.nodes.size());
  if (n == 0) {
    out.message = "empty graph";
    return out;
  }
  if (graph.priors.empty()) {
    out.message = "graph has no prior";
    return out;
  }

  const int dim = 6 * n;
  double lambda = 1e-6;
  double cost = cost_of(graph.nodes, graph);
  out.initial_cost = cost;
  out.cost_trace.push_back(cost);

  for (int iter = 0; iter < max_iter; ++iter) {
    Eigen::MatrixXd Hmat = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);

    for (const PriorFactor& f : graph.priors) {
      Mat6 J;
      const Vec6 r = prior_residual(graph.nodes[f.node], f.pose, &J);
      const Mat6 JtW = J.transpose() * f.information;
      Hmat.block<6, 6>(6 * f.node, 6 * f.node) += JtW * J;
      b.segment<6>(6 * f.node) += JtW * r;
    }
    for (const BetweenFactor& f : graph.betweens) {
      Mat6 Ji, Jj;
      const Vec6 r = between_residual(graph.nodes[f.from], graph.nodes[f.to],
                                      f.measured, &Ji, &Jj);
      const Mat6 JiW = Ji.transpose() * f.information;
      const Mat6 JjW = Jj.transpose() * f.information;
      Hmat.block<6, 6>(6 * f.from, 6 * f.from) += JiW * Ji;
      Hmat.block<6, 6>(6 * f.to, 6 * f.to) += JjW * Jj;
      Hmat.block<6, 6>(6 * f.from, 6 * f.to) += JiW * Jj;
      Hmat.block<6, 6>(6 * f.to, 6 * f.from) += JjW * Ji;
      b.segment<6>(6 * f.from) += JiW * r;
      b.segment<6>(6 * f.to) += JjW * r;
    }

    bool stepped = false;
    for (int attempt = 0; attempt < 12; ++attempt) {
      Eigen::MatrixXd damped = Hmat;
      damped.diagonal() += lambda * Hmat.diagonal().cwiseMax(1e-12);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
      if (ldlt.info() != Eigen::Success) {
        lambda *= 10.0;
        continue;
      }
      const Eigen::VectorXd delta = ldlt.solve(-b);
      if (!delta.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      std::vector<Pose3> trial = graph.nodes;
      for (int i = 0; i < n; ++i) {
        trial[i].R = trial[i].R * so3_exp(delta.segment<3>(6 * i));
        trial[i].p += delta.segment<3>(6 * i + 3);
      }
      const double trial_cost = cost_of(trial, graph);
      if (trial_cost <= cost) {
        graph.nodes = std::move(trial);
        const double drop = cost - trial_cost;
        cost = trial_cost;
        out.cost_trace.push_back(cost);
        lambda = std::max(lambda * 0.5, 1e-12);
        stepped = true;
        out.iterations = iter + 1;
        if (drop < rel_tol * std::max(cost, 1e-12)) {
          out.success = true;
          out.final_cost = cost;
          out.message = "converged";
          return out;
        }
        break;
      }
      lambda *= 10.0;
    }
    if (!stepped) {
      out.success = cost <= out.initial_cost;
      out.final_cost = cost;
      out.message = out.success ? "stalled at local minimum"
                                : "singular normal equations";
      return out;
    }
  }
  out.success = true;
  out.final_cost = cost;
  out.message = "iteration limit";
  return out;
}

std::vector<Pose3> propagate_correction(
    const std::vector<Pose3>& trajectory, const std::vector<int>& anchor,
    const std::vector<Pose3>& old_kf_poses,
    const std::vector<Pose3>& new_kf_poses) {
  std::vector<Pose3> out = trajectory;
  for (size_t i = 0; i < trajectory.size(); ++i) {
    const int a = anchor[i];
    if (a < 0) continue;
    // T_new = T_kf_new * (T_kf_old^-1 * T_old)
    out[i] = new_kf_poses[a] * (old_kf_poses[a].inverse() * trajectory[i]);
  }
  return out;
}

}  // namespace bevodom
