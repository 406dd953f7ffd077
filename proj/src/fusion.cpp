#include "bevodom/fusion.hpp"

#include <Eigen/Cholesky>
#include <cmath>

namespace bevodom {

std::vector<ReprojResidual> build_reproj_residuals(
    const FeatureFrame& prev, const FeatureFrame& curr,
    const MatchSet& matches, const std::vector<uint8_t>& inlier_mask,
    const NavState& x, const Pose3& T_IL, const FusionConfig& cfg) {
  std::vector<ReprojResidual> out;
  if (matches.empty()) return out;

  const BevConfig& bev_cfg = curr.proj.image.cfg;
  const Eigen::Matrix<double, 2, 3> d_pix =
      cfg.eta * projection_jacobian(bev_cfg);

  const Pose3 T_WI_curr(x.R_WI, x.p_WI);
  // Maps current LiDAR frame into the previous LiDAR frame through the
  // fixed previous pose and the current state iterate.
  const Pose3 T_prevL_W = (prev.T_WI * T_IL).inverse();
  const Mat3 R_prevL_W = T_prevL_W.R;

  for (size_t m = 0; m < matches.size(); ++m) {
    if (!inlier_mask.empty() && !inlier_mask[m]) continue;
    const Keypoint& kp_prev = prev.keypoints[matches[m].a];
    const Keypoint& kp_curr = curr.keypoints[matches[m].b];

    const int cu = static_cast<int>(std::floor(kp_curr.u));
    const int cv = static_cast<int>(std::floor(kp_curr.v));
    const int pu = static_cast<int>(std::floor(kp_prev.u));
    const int pv = static_cast<int>(std::floor(kp_prev.v));
    if (!curr.proj.image.in_bounds(cu, cv) ||
        !prev.proj.image.in_bounds(pu, pv)) {
      continue;
    }
    const Vec3* p_curr = curr.proj.cell_source(cu, cv);
    const Vec3* p_prev = prev.proj.cell_source(pu, pv);
    if (!p_curr || !p_prev) continue;

    // Observation: the previous frame's own measurement of the feature.
    const Vec2 observed = project_continuous(*p_prev, bev_cfg);

    // Prediction: current source point carried into the previous LiDAR
    // frame through the state, then projected.
    const Vec3 p_I = T_IL * (*p_curr);          // current IMU frame, fixed
    const Vec3 p_W = T_WI_curr * p_I;           // world via the iterate
    const Vec3 p_prevL = T_prevL_W * p_W;
    const Vec2 predicted = project_continuous(p_prevL, bev_cfg);

    ReprojResidual res;
    res.z = observed - predicted;
    if (res.z.norm() > cfg.reproj_gate_px) continue;

    // d p_prevL / d(dtheta) = -R_prevL_W * R_WI * [p_I]x,
    // d p_prevL / d(dp)     =  R_prevL_W.
    Eigen::Matrix<double, 3, 6> d_point;
    d_point.leftCols<3>() = -R_prevL_W * x.R_WI * skew(p_I);
    d_point.rightCols<3>() = R_prevL_W;

    // z = observed - pix(p_prevL): the projection derivative enters with
    // a sign flip.
    res.H.block<2, 6>(0, err::kTheta) = -d_pix * d_point;
    res.pix_prev = Vec2(kp_prev.u, kp_prev.v);
    res.pix_curr = Vec2(kp_curr.u, kp_curr.v);
    res.p_curr_L = *p_curr;
    out.push_back(res);
  }
  return out;
}

ResidualStack stack(const std::vector<GeoResidual>& geo,
                    const std::vector<ReprojResidual>& proj,
                    const FusionConfig& cfg) {
  ResidualStack s;
  s.geo_rows = static_cast<int>(geo.size());
  s.proj_rows = 2 * static_cast<int>(proj.size());
  const int rows = s.geo_rows + s.proj_rows;
  s.z.resize(rows);
  s.H.resize(rows, err::kDim);
  s.noise_var.resize(rows);

  int r = 0;
  for (const GeoResidual& g : geo) {
    s.z[r] = g.z;
    s.H.row(r) = g.H;
    s.noise_var[r] = cfg.alpha_geo;
    ++r;
  }
  for (const ReprojResidual& p : proj) {
    s.z.segment<2>(r) = cfg.lambda * p.z;
    s.H.block<2, err::kDim>(r, 0) = cfg.lambda * p.H;
    s.noise_var.segment<2>(r).setConstant(cfg.alpha_proj);
    r += 2;
  }
  return s;
}

namespace {

using Mat18 = Eigen::Matrix<double, err::kDim, err::kDim>;
using Vec18 = Eigen::Matrix<double, err::kDim, 1>;

// Normal-equation terms accumulated row by row in stack order, so the
// result is independent of how Eigen would block a large product.
void normal_equations(const ResidualStack& s, Mat18* HtRinvH, Vec18* HtRinvZ) {
  HtRinvH->setZero();
  HtRinvZ->setZero();
  for (int r = 0; r < s.z.size(); ++r) {
    const double w = 1.0 / s.noise_var[r];
    const auto row = s.H.row(r);
    HtRinvH->noalias() += (w * row.transpose()) * row;
    HtRinvZ->noalias() += (w * s.z[r]) * row.transpose();
  }
}

}  // namespace

UpdateResult iekf_update(const NavState& prior, const Covariance& P,
                         const ResidualBuilder& builder,
                         const FusionConfig& cfg, UpdateDiagnostics* diag) {
  UpdateDiagnostics local_diag;
  UpdateDiagnostics& d = diag ? *diag : local_diag;
  d = UpdateDiagnostics{};

  UpdateResult out{prior, P};

  Eigen::LDLT<Mat18> P_ldlt(P);
  if (P_ldlt.info() != Eigen::Success) {
    P_ldlt.compute(P + 1e-9 * Mat18::Identity());
    d.regularized = true;
  }
  const Mat18 P_inv = P_ldlt.solve(Mat18::Identity());

  NavState iterate = prior;
  Mat18 S_last = Mat18::Zero();
  bool have_rows = false;
  double prev_cost = std::numeric_limits<double>::infinity();
  int cost_increases = 0;

  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    const ResidualBundle bundle = builder(iterate);
    d.geo_count = static_cast<int>(bundle.geo.size());
    d.proj_count = static_cast<int>(bundle.proj.size());
    if (bundle.geo.empty() && bundle.proj.empty()) {
      // Nothing to correct with; keep the prediction.
      d.iterations = iter;
      return out;
    }
    const ResidualStack s = stack(bundle.geo, bundle.proj, cfg);

    double rms_geo = 0.0, rms_proj = 0.0;
    for (const GeoResidual& g : bundle.geo) rms_geo += g.z * g.z;
    for (const ReprojResidual& p : bundle.proj) rms_proj += p.z.squaredNorm();
    d.rms_geo = bundle.geo.empty()
                    ? 0.0
                    : std::sqrt(rms_geo / bundle.geo.size());
    d.rms_proj = bundle.proj.empty()
                     ? 0.0
                     : std::sqrt(rms_proj / (2.0 * bundle.proj.size()));

    Mat18 HtRinvH;
    Vec18 HtRinvZ;
    normal_equations(s, &HtRinvH, &HtRinvZ);

    const ErrorState delta_prior = boxminus(iterate, prior);
    double cost = delta_prior.dot(P_inv * delta_prior);
    for (int r = 0; r < s.z.size(); ++r) {
      cost += s.z[r] * s.z[r] / s.noise_var[r];
    }
    if (cost > prev_cost) {
      if (++cost_increases >= 3) {
        d.diverged = true;
        d.iterations = iter;
        return {prior, P};  // revert to the prediction
      }
    } else {
      cost_increases = 0;
    }
    prev_cost = cost;

    Mat18 S = HtRinvH + P_inv;
    Eigen::LDLT<Mat18> S_ldlt(S);
    if (S_ldlt.info() != Eigen::Success || !S_ldlt.isPositive()) {
      S += 1e-9 * Mat18::Identity();
      S_ldlt.compute(S);
      d.regularized = true;
    }
    S_last = S;
    have_rows = true;

    // Eq.-style gain application without forming K explicitly:
    // K z = S^-1 H^T R^-1 z and (I - K H) = S^-1 P^-1.
    const Vec18 Kz = S_ldlt.solve(HtRinvZ);
    const Vec18 pull = S_ldlt.solve(P_inv * delta_prior);

    // x^{k+1} = x^k boxplus (-K z - (I - K H) (x^k boxminus prior)).
    iterate = boxplus(iterate, -Kz - pull);
    d.iterations = iter + 1;

    if ((Kz + pull).norm() < cfg.eps_conv) {
      d.converged = true;
      break;
    }
  }

  if (have_rows) {
    Eigen::LDLT<Mat18> S_ldlt(S_last);
    Covariance P_post = S_ldlt.solve(Mat18::Identity());
    out.cov = 0.5 * (P_post + P_post.transpose()).eval();
    out.state = iterate;
    d.updated = true;
  }
  return out;
}

}  // namespace bevodom
