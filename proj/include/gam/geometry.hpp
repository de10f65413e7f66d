#pragma once

#include <array>
#include <cmath>

#include "gam/common.hpp"

namespace gam {

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues' formula. Near zero the sin/cos factors are replaced by their
// series limits, keeping the result exact to machine precision.
inline Mat3 axis_angle_to_matrix(const Vec3& aa) {
  const double theta2 = aa.squaredNorm();
  const Mat3 k = skew(aa);
  if (theta2 < 1e-16) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double theta = std::sqrt(theta2);
  const double s = std::sin(theta) / theta;
  const double half_sin = std::sin(0.5 * theta);
  const double c = 2.0 * half_sin * half_sin / theta2;  // (1 - cos) / theta^2
  return Mat3::Identity() + s * k + c * k * k;
}

inline Vec3 matrix_to_axis_angle(const Mat3& r) {
  Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

// Wraps the rotation angle into [0, 2*pi); a zero rotation maps to the zero vector.
inline Vec3 canonicalize_axis_angle(const Vec3& aa) {
  const double theta = aa.norm();
  if (theta < 1e-12) return Vec3::Zero();
  const double two_pi = 2.0 * M_PI;
  double wrapped = std::fmod(theta, two_pi);
  if (wrapped < 0) wrapped += two_pi;
  return aa * (wrapped / theta);
}

// dR/d(aa_i), i = 0,1,2 (Gallego & Yezzi closed form).
inline std::array<Mat3, 3> axis_angle_to_matrix_jacobian(const Vec3& aa) {
  std::array<Mat3, 3> d;
  const double theta2 = aa.squaredNorm();
  if (theta2 < 1e-16) {
    for (int i = 0; i < 3; ++i) d[i] = skew(Vec3::Unit(i));
    return d;
  }
  const Mat3 r = axis_angle_to_matrix(aa);
  const Mat3 i_minus_r = Mat3::Identity() - r;
  for (int i = 0; i < 3; ++i) {
    const Vec3 e = Vec3::Unit(i);
    d[i] = (aa[i] * skew(aa) + skew(aa.cross(i_minus_r * e))) * r / theta2;
  }
  return d;
}

// Best-fit rotation mapping columns of `src` onto columns of `dst`
// (Kabsch, no scaling). Degenerate inputs fall back to identity.
inline Mat3 kabsch_rotation(const MatX& src, const MatX& dst) {
  const Mat3 h = dst * src.transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  double det = (u * v.transpose()).determinant();
  if (det < 0) u.col(2) *= -1.0;
  Mat3 r = u * v.transpose();
  if (!r.allFinite()) return Mat3::Identity();
  return r;
}

// Minimal rotation taking direction a to direction b, as an axis-angle vector.
inline Vec3 rotation_between(const Vec3& a, const Vec3& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return Vec3::Zero();
  const Vec3 an = a / na, bn = b / nb;
  const Vec3 axis = an.cross(bn);
  const double s = axis.norm();
  const double c = an.dot(bn);
  if (s < 1e-12) {
    if (c > 0) return Vec3::Zero();
    // Antiparallel: pick any axis orthogonal to a.
    Vec3 orth = std::abs(an.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    Vec3 ax = an.cross(orth).normalized();
    return M_PI * ax;
  }
  return std::atan2(s, c) * (axis / s);
}

}  // namespace gam
