#pragma once

#include <array>
#include <cmath>

namespace fixelfit {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 scaled(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

inline Vec3 normalized(const Vec3& a) { return scaled(a, 1.0 / norm(a)); }

// Angle between two axes in degrees; sign of either vector is irrelevant.
inline double axis_angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::fabs(dot(a, b)) / (norm(a) * norm(b));
  return std::acos(std::min(1.0, c)) * 180.0 / M_PI;
}

// Some unit vector orthogonal to a (a must be nonzero).
inline Vec3 any_perpendicular(const Vec3& a) {
  const Vec3 ref = std::fabs(a[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  return normalized(cross(a, ref));
}

}  // namespace fixelfit
