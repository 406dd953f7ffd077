// Rigid-body math shared by the filter, the registration front-end and the
// pose graph: SO(3) exp/log, SE(3) and planar SE(2) transforms, and the lift
// from pixel-space rigid transforms to world-frame planar motions.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace bevodom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// skew(v) * w == v x w for all w.
Mat3 skew(const Vec3& v);

// Rodrigues formula; series expansion below 1e-10 rad.
Mat3 so3_exp(const Vec3& omega);

// Inverse of so3_exp on [0, pi]; sign-stable branch at pi.
Vec3 so3_log(const Mat3& rot);

// Right Jacobian of SO(3) and its inverse.
Mat3 so3_right_jacobian(const Vec3& omega);
Mat3 so3_right_jacobian_inv(const Vec3& omega);

bool is_rotation(const Mat3& rot, double tol = 1e-9);

// Wraps an angle to (-pi, pi].
double wrap_angle(double theta);

// Rigid transform in 3-D. Composition acts on points as R*x + p.
struct Pose3 {
  Mat3 R = Mat3::Identity();
  Vec3 p = Vec3::Zero();

  Pose3() = default;
  Pose3(const Mat3& rot, const Vec3& trans) : R(rot), p(trans) {}

  static Pose3 identity() { return {}; }

  Pose3 operator*(const Pose3& other) const {
    return {R * other.R, R * other.p + p};
  }
  Vec3 operator*(const Vec3& x) const { return R * x + p; }

  Pose3 inverse() const { return {R.transpose(), -(R.transpose() * p)}; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = p;
    return m;
  }
};

// Rigid transform in the 2-D image plane: act(x) = R(theta)*x + t.
// theta is kept wrapped to (-pi, pi].
struct Pose2 {
  double theta = 0.0;
  Vec2 t = Vec2::Zero();

  Pose2() = default;
  Pose2(double angle, const Vec2& trans) : theta(wrap_angle(angle)), t(trans) {}

  static Pose2 identity() { return {}; }

  Mat2 rotation() const {
    const double c = std::cos(theta), s = std::sin(theta);
    Mat2 r;
    r << c, -s, s, c;
    return r;
  }

  Vec2 act(const Vec2& x) const { return rotation() * x + t; }

  Pose2 operator*(const Pose2& other) const {
    return {theta + other.theta, rotation() * other.t + t};
  }

  Pose2 inverse() const {
    return {-theta, -(Pose2(-theta, Vec2::Zero()).rotation() * t)};
  }
};

// Lifts a rigid transform between two BEV images (centered pixel
// coordinates, u from -y, v from -x, both scaled by 1/mu) to the planar
// world-frame motion W that satisfies  project(W * X) == pix.act(project(X))
// for every point X. The axis swap of the projection reverses the sense of
// rotation, so the lifted yaw is -theta and the translation swaps u/v.
Pose3 pose2_to_pose3(const Pose2& pix, double mu);

}  // namespace bevodom
