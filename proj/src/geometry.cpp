#include "bevodom/geometry.hpp"

#include <cmath>

namespace bevodom {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < 1e-20) {
    return Mat3::Identity() + w + 0.5 * w * w;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + (std::sin(theta) / theta) * w +
         ((1.0 - std::cos(theta)) / theta2) * (w * w);
}

Vec3 so3_log(const Mat3& rot) {
  const double cos_theta =
      std::clamp(0.5 * (rot.trace() - 1.0), -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  Vec3 w(rot(2, 1) - rot(1, 2), rot(0, 2) - rot(2, 0), rot(1, 0) - rot(0, 1));
  if (theta < 1e-7) {
    return 0.5 * w;
  }
  if (theta < M_PI - 1e-5) {
    return (theta / (2.0 * std::sin(theta))) * w;
  }
  // Near pi the antisymmetric part vanishes; recover the axis from the
  // symmetric part R ~ 2*a*a^T - I.
  Mat3 sym = 0.5 * (rot + Mat3::Identity());
  int i0 = 0;
  sym.diagonal().maxCoeff(&i0);
  Vec3 axis;
  axis[i0] = std::sqrt(std::max(sym(i0, i0), 0.0));
  const int i1 = (i0 + 1) % 3, i2 = (i0 + 2) % 3;
  axis[i1] = sym(i0, i1) / axis[i0];
  axis[i2] = sym(i0, i2) / axis[i0];
  axis.normalize();
  // Keep the sign consistent with the antisymmetric residual when it is
  // usable, otherwise pick the canonical representative.
  if (axis.dot(w) < 0.0) {
    axis = -axis;
  } else if (w.norm() < 1e-12) {
    if (axis[i0] < 0.0) axis = -axis;
  }
  return theta * axis;
}

Mat3 so3_right_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < 1e-16) {
    return Mat3::Identity() - 0.5 * w + (1.0 / 6.0) * (w * w);
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() - ((1.0 - std::cos(theta)) / theta2) * w +
         ((theta - std::sin(theta)) / (theta2 * theta)) * (w * w);
}

Mat3 so3_right_jacobian_inv(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < 1e-16) {
    return Mat3::Identity() + 0.5 * w + (1.0 / 12.0) * (w * w);
  }
  const double theta = std::sqrt(theta2);
  const double coeff =
      1.0 / theta2 -
      (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * w + coeff * (w * w);
}

bool is_rotation(const Mat3& rot, double tol) {
  const double ortho = (rot.transpose() * rot - Mat3::Identity())
                           .cwiseAbs()
                           .maxCoeff();
  return ortho < tol && std::abs(rot.determinant() - 1.0) < tol;
}

double wrap_angle(double theta) {
  theta = std::fmod(theta, 2.0 * M_PI);
  if (theta <= -M_PI) theta += 2.0 * M_PI;
  if (theta > M_PI) theta -= 2.0 * M_PI;
  return theta;
}

Pose3 pose2_to_pose3(const Pose2& pix, double mu) {
  // Conjugate the pixel transform by the projection map
  // M(x, y) = (-y/mu, -x/mu). The axis swap flips the handedness, so the
  // pixel rotation by theta becomes a world yaw of -theta and the pixel
  // translation (tu, tv) maps to world (-mu*tv, -mu*tu).
  const double c = std::cos(pix.theta), s = std::sin(pix.theta);
  Mat3 rot;
  rot << c, s, 0.0,
        -s, c, 0.0,
         0.0, 0.0, 1.0;
  const Vec3 trans(-mu * pix.t.y(), -mu * pix.t.x(), 0.0);
  return {rot, trans};
}

}  // namespace bevodom
