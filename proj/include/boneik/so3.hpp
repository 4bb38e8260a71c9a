#pragma once

// Rotation-group primitives. Everything is templated on the scalar type so the
// same code serves the single-precision deployment path and the
// double-precision reference path.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <utility>

#include "boneik/error.hpp"

namespace boneik {

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
/// Quaternion stored as (w, x, y, z).
template <typename Scalar>
using Quat4 = Eigen::Matrix<Scalar, 4, 1>;

template <typename Scalar>
struct AxisAngle {
  Vec3<Scalar> axis;
  Scalar angle;
};

/// Threshold below which a 6D input is considered degenerate.
inline constexpr double kRot6dEpsilon = 1e-8;

/// Gram-Schmidt map from the continuous 6D parameterization to SO(3).
/// Columns of the result are the orthonormalized a1, a2 and their cross product.
template <typename Scalar>
Mat3<Scalar> rot_from_6d(const Vec3<Scalar>& a1, const Vec3<Scalar>& a2) {
  const Scalar n1 = a1.norm();
  if (!(n1 > Scalar(kRot6dEpsilon))) {
    throw DegenerateInputError("rot_from_6d: first vector has (near-)zero norm");
  }
  const Vec3<Scalar> x = a1 / n1;
  Vec3<Scalar> y_raw = a2 - a2.dot(x) * x;
  // Second pass restores orthogonality lost to cancellation when a2 is nearly parallel to a1.
  y_raw -= y_raw.dot(x) * x;
  const Scalar n2 = y_raw.norm();
  if (!(n2 > Scalar(kRot6dEpsilon))) {
    throw DegenerateInputError("rot_from_6d: second vector is collinear with the first");
  }
  const Vec3<Scalar> y = y_raw / n2;
  Mat3<Scalar> r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = x.cross(y);
  return r;
}

/// Rotation matrix back to its canonical 6D form (first two columns).
template <typename Scalar>
Eigen::Matrix<Scalar, 6, 1> rot_to_6d(const Mat3<Scalar>& r) {
  Eigen::Matrix<Scalar, 6, 1> out;
  out << r.col(0), r.col(1);
  return out;
}

namespace detail {

template <typename Scalar>
Vec3<Scalar> vee_antisym(const Mat3<Scalar>& m) {
  return Vec3<Scalar>(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
}

}  // namespace detail

/// Geodesic distance on SO(3), in radians, range [0, pi].
///
/// Equal to arccos((tr(a^T b) - 1) / 2) on SO(3). The angle is evaluated as
/// atan2(sin, cos) with sin taken from the antisymmetric part of a^T b, which
/// keeps full precision near 0 and pi where arccos loses half the digits.
template <typename Scalar>
Scalar geodesic(const Mat3<Scalar>& a, const Mat3<Scalar>& b) {
  // Elementwise forms of tr(a^T b) and of the antisymmetric part of a^T b.
  // Each term is written so that swapping a and b gives bitwise equal trace
  // and a negated sine vector.
  const Scalar tr = a.cwiseProduct(b).sum();
  Vec3<Scalar> s;
  s(0) = a.col(1).dot(b.col(2)) - a.col(2).dot(b.col(1));
  s(1) = a.col(2).dot(b.col(0)) - a.col(0).dot(b.col(2));
  s(2) = a.col(0).dot(b.col(1)) - a.col(1).dot(b.col(0));
  const Scalar c = (tr - Scalar(1)) / Scalar(2);
  const Scalar sn = s.norm() / Scalar(2);
  return std::atan2(sn, c);
}

template <typename Scalar>
Mat3<Scalar> skew(const Vec3<Scalar>& v) {
  Mat3<Scalar> m;
  m << Scalar(0), -v.z(), v.y(), v.z(), Scalar(0), -v.x(), -v.y(), v.x(), Scalar(0);
  return m;
}

/// Rodrigues formula. `axis` must be unit length.
template <typename Scalar>
Mat3<Scalar> axis_angle_to_matrix(const Vec3<Scalar>& axis, Scalar angle) {
  const Mat3<Scalar> k = skew(axis);
  return Mat3<Scalar>::Identity() + std::sin(angle) * k + (Scalar(1) - std::cos(angle)) * k * k;
}

/// Exponential map of a rotation vector (axis * angle).
template <typename Scalar>
Mat3<Scalar> exp_so3(const Vec3<Scalar>& omega) {
  const Scalar angle = omega.norm();
  if (angle == Scalar(0)) return Mat3<Scalar>::Identity();
  return axis_angle_to_matrix<Scalar>(omega / angle, angle);
}

/// Inverse of Rodrigues. Angle 0 yields axis (1,0,0). Angles beyond pi/2 take
/// the axis from the symmetric part, which stays well conditioned up to pi.
template <typename Scalar>
AxisAngle<Scalar> matrix_to_axis_angle(const Mat3<Scalar>& m) {
  const Vec3<Scalar> v = detail::vee_antisym(m);
  const Scalar c = (m.trace() - Scalar(1)) / Scalar(2);
  const Scalar s = v.norm() / Scalar(2);
  const Scalar angle = std::atan2(s, c);
  if (s == Scalar(0) && c > Scalar(0)) {
    return {Vec3<Scalar>::UnitX(), Scalar(0)};
  }
  if (c >= Scalar(0)) {
    return {v.normalized(), angle};
  }
  // a a^T = (sym(m) - cos I) / (1 - cos); take the best-conditioned column.
  const Mat3<Scalar> aat =
      ((m + m.transpose()) / Scalar(2) - c * Mat3<Scalar>::Identity()) / (Scalar(1) - c);
  Eigen::Index k = 0;
  aat.diagonal().maxCoeff(&k);
  Vec3<Scalar> axis = aat.col(k) / std::sqrt(std::max(aat(k, k), Scalar(0)));
  axis.normalize();
  if (axis.dot(v) < Scalar(0)) axis = -axis;
  return {axis, angle};
}

/// Unit quaternion (w,x,y,z) to matrix; the input is normalized first.
template <typename Scalar>
Mat3<Scalar> quat_to_matrix(const Quat4<Scalar>& q) {
  const Scalar n = q.norm();
  if (!(n > Scalar(0))) throw DegenerateInputError("quat_to_matrix: zero quaternion");
  const Eigen::Quaternion<Scalar> e(q(0) / n, q(1) / n, q(2) / n, q(3) / n);
  return e.toRotationMatrix();
}

/// Matrix to quaternion (w,x,y,z) with w >= 0.
template <typename Scalar>
Quat4<Scalar> matrix_to_quat(const Mat3<Scalar>& m) {
  Eigen::Quaternion<Scalar> e(m);
  e.normalize();
  Quat4<Scalar> q(e.w(), e.x(), e.y(), e.z());
  if (q(0) < Scalar(0)) q = -q;
  return q;
}

/// Angle between two vectors, computed from both sine and cosine.
template <typename Scalar>
Scalar angle_between(const Vec3<Scalar>& u, const Vec3<Scalar>& v) {
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

/// Swing error (first frame axis) and twist error (second frame axis) in
/// radians for rotations interpreted as bone-aligned frames.
template <typename Scalar>
std::pair<Scalar, Scalar> axis_errors(const Mat3<Scalar>& pred, const Mat3<Scalar>& gt) {
  return {angle_between<Scalar>(pred.col(0), gt.col(0)),
          angle_between<Scalar>(pred.col(1), gt.col(1))};
}

/// Uniformly distributed unit vector.
template <typename Scalar, typename Rng>
Vec3<Scalar> random_unit_vector(Rng& rng) {
  std::uniform_real_distribution<double> uz(-1.0, 1.0);
  std::uniform_real_distribution<double> uphi(0.0, 2.0 * std::numbers::pi);
  const double z = uz(rng);
  const double phi = uphi(rng);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return Vec3<Scalar>(Scalar(r * std::cos(phi)), Scalar(r * std::sin(phi)), Scalar(z));
}

/// Rotation with a uniformly random axis and angle uniform in [0, max_angle].
template <typename Scalar, typename Rng>
Mat3<Scalar> random_rotation(Rng& rng, Scalar max_angle) {
  const Vec3<Scalar> axis = random_unit_vector<Scalar>(rng);
  std::uniform_real_distribution<double> ua(0.0, static_cast<double>(max_angle));
  return axis_angle_to_matrix<Scalar>(axis, Scalar(ua(rng)));
}

/// Infinity norm of R^T R - I.
template <typename Scalar>
Scalar orthonormality_error(const Mat3<Scalar>& r) {
  return (r.transpose() * r - Mat3<Scalar>::Identity()).cwiseAbs().maxCoeff();
}

template <typename Scalar>
bool is_rotation(const Mat3<Scalar>& r, Scalar tol) {
  return orthonormality_error(r) < tol && std::abs(r.determinant() - Scalar(1)) < tol;
}

inline double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }
inline double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace boneik
