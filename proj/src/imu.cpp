#include "bevodom/imu.hpp"

#include <algorithm>
#include <cmath>

namespace bevodom {

Pose3 PoseBuffer::interpolate(double t, bool* clamped) const {
  if (clamped) *clamped = false;
  if (knots_.empty()) {
    throw std::runtime_error("pose buffer is empty");
  }
  if (t <= knots_.front().t) {
    if (clamped && t < knots_.front().t - 1e-12) *clamped = true;
    return {knots_.front().R, knots_.front().p};
  }
  if (t >= knots_.back().t) {
    if (clamped && t > knots_.back().t + 1e-12) *clamped = true;
    return {knots_.back().R, knots_.back().p};
  }
  const auto it = std::upper_bound(
      knots_.begin(), knots_.end(), t,
      [](double value, const Knot& k) { return value < k.t; });
  const Knot& hi = *it;
  const Knot& lo = *(it - 1);
  const double span = hi.t - lo.t;
  const double a = span > 0.0 ? (t - lo.t) / span : 0.0;
  const Vec3 omega = so3_log(lo.R.transpose() * hi.R);
  return {lo.R * so3_exp(a * omega), (1.0 - a) * lo.p + a * hi.p};
}

namespace {

struct Segment {
  double dt;
  Vec3 gyro_mid;
  Vec3 accel_mid;
};

}  // namespace

PropagationResult ImuPropagator::propagate(const NavState& x,
                                           const Covariance& P,
                                           std::span<const ImuSample> samples,
                                           double t0, double t1) const {
  if (!(t0 < t1)) {
    throw std::invalid_argument("propagate requires t0 < t1");
  }
  if (samples.empty()) {
    throw PropagationGapError("no IMU samples for propagation window");
  }
  if (samples.front().t > t0 + max_gap_ || samples.back().t < t1 - max_gap_) {
    throw PropagationGapError("IMU stream does not cover the window");
  }
  for (size_t i = 1; i < samples.size(); ++i) {
    const double gap = samples[i].t - samples[i - 1].t;
    if (samples[i].t > t0 && samples[i - 1].t < t1 && gap > max_gap_) {
      throw PropagationGapError("IMU gap of " + std::to_string(gap) + " s");
    }
  }

  // Knot times: t0, every sample time strictly inside (t0, t1), t1.
  std::vector<double> times{t0};
  for (const ImuSample& s : samples) {
    if (s.t > t0 && s.t < t1) times.push_back(s.t);
  }
  times.push_back(t1);

  // Mid-point measurement for [a, b]: average of the samples bracketing
  // the enclosing inter-sample interval, held at the edges of the stream.
  const auto bracket_mid = [&](double a, double b) -> Segment {
    const double mid_t = 0.5 * (a + b);
    size_t hi = 0;
    while (hi < samples.size() && samples[hi].t < mid_t) ++hi;
    Segment seg;
    seg.dt = b - a;
    if (hi == 0) {
      seg.gyro_mid = samples.front().gyro;
      seg.accel_mid = samples.front().accel;
    } else if (hi == samples.size()) {
      seg.gyro_mid = samples.back().gyro;
      seg.accel_mid = samples.back().accel;
    } else {
      seg.gyro_mid = 0.5 * (samples[hi - 1].gyro + samples[hi].gyro);
      seg.accel_mid = 0.5 * (samples[hi - 1].accel + samples[hi].accel);
    }
    return seg;
  };

  PropagationResult out;
  out.state = x;
  out.cov = P;
  out.buffer.push(t0, x.R_WI, x.p_WI);

  for (size_t k = 0; k + 1 < times.size(); ++k) {
    const Segment seg = bracket_mid(times[k], times[k + 1]);
    const double dt = seg.dt;
    if (dt <= 0.0) continue;

    NavState& s = out.state;
    const Vec3 omega = seg.gyro_mid - s.b_g;
    const Vec3 accel_b = seg.accel_mid - s.b_a;

    const Mat3 R_half = s.R_WI * so3_exp(0.5 * dt * omega);
    const Vec3 accel_w = R_half * accel_b + s.g_W;

    // First-order error transition, layout per err::.
    Covariance F = Covariance::Identity();
    F.block<3, 3>(err::kTheta, err::kTheta) = so3_exp(-dt * omega);
    F.block<3, 3>(err::kTheta, err::kBg) =
        -dt * so3_right_jacobian(dt * omega);
    F.block<3, 3>(err::kPos, err::kVel) = dt * Mat3::Identity();
    F.block<3, 3>(err::kVel, err::kTheta) = -dt * s.R_WI * skew(accel_b);
    F.block<3, 3>(err::kVel, err::kBa) = -dt * s.R_WI;
    F.block<3, 3>(err::kVel, err::kGrav) = dt * Mat3::Identity();

    Covariance Q = Covariance::Zero();
    Q.block<3, 3>(err::kTheta, err::kTheta) =
        noise_.sigma_g * noise_.sigma_g * dt * Mat3::Identity();
    Q.block<3, 3>(err::kVel, err::kVel) =
        noise_.sigma_a * noise_.sigma_a * dt * Mat3::Identity();
    Q.block<3, 3>(err::kBa, err::kBa) =
        noise_.sigma_ba * noise_.sigma_ba * dt * Mat3::Identity();
    Q.block<3, 3>(err::kBg, err::kBg) =
        noise_.sigma_bg * noise_.sigma_bg * dt * Mat3::Identity();

    out.cov = F * out.cov * F.transpose() + Q;
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();

    s.p_WI += s.v_W * dt + 0.5 * dt * dt * accel_w;
    s.v_W += accel_w * dt;
    s.R_WI = s.R_WI * so3_exp(dt * omega);

    out.buffer.push(times[k + 1], s.R_WI, s.p_WI);
  }
  return out;
}

UndistortedScan undistort(const RawScan& scan, const PoseBuffer& buffer,
                          const Pose3& T_IL, int* clamped_count) {
  UndistortedScan out;
  out.end_time = scan.end_time;
  out.points.reserve(scan.points.size());
  int clamped_total = 0;

  const Pose3 T_WL_end = buffer.interpolate(scan.end_time) * T_IL;
  const Pose3 T_LW_end = T_WL_end.inverse();
  for (const TimedPoint& tp : scan.points) {
    bool clamped = false;
    const Pose3 T_WI_pt = buffer.interpolate(scan.end_time + tp.offset,
                                             &clamped);
    clamped_total += clamped ? 1 : 0;
    out.points.push_back(T_LW_end * (T_WI_pt * (T_IL * tp.p)));
  }
  if (clamped_count) *clamped_count = clamped_total;
  return out;
}

}  // namespace bevodom
