#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here is deliberately written from first principles so it can contradict the
// library if the library is wrong.

#include "epipose/geom.hpp"
#include "epipose/rng.hpp"

#include <cmath>
#include <vector>

namespace epitest {

using namespace epipose;

inline Camera make_camera(double f, double cx, double cy, int w, int h,
                          const Mat3& r = Mat3::Identity(),
                          const Vec3& t = Vec3::Zero()) {
  Camera c;
  c.K << f, 0, cx, 0, f, cy, 0, 0, 1;
  c.R_wc = r;
  c.t_wc = t;
  c.width = w;
  c.height = h;
  return c;
}

inline Mat3 rot_z(double rad) {
  Mat3 r;
  r << std::cos(rad), -std::sin(rad), 0, std::sin(rad), std::cos(rad), 0, 0, 0, 1;
  return r;
}

inline Mat3 rot_y(double rad) {
  Mat3 r;
  r << std::cos(rad), 0, std::sin(rad), 0, 1, 0, -std::sin(rad), 0, std::cos(rad);
  return r;
}

inline Mat3 rot_x(double rad) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(rad), -std::sin(rad), 0, std::sin(rad), std::cos(rad);
  return r;
}

/// Camera at `eye` looking at `target` (camera +z toward target).
inline Camera look_at_camera(double f, int size, const Vec3& eye,
                             const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  Vec3 z = (target - eye).normalized();
  Vec3 upn = up;
  if (std::abs(z.dot(upn)) > 0.99) upn = Vec3::UnitY();
  const Vec3 x = upn.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  return make_camera(f, size / 2.0, size / 2.0, size, size, r, -r * eye);
}

/// Ring of cameras looking at `target` from distance `radius`.
inline std::vector<Camera> camera_ring(int n, double radius, const Vec3& target,
                                       double f, int size, Rng& rng,
                                       double elev_jitter_deg = 15.0) {
  std::vector<Camera> cams;
  for (int k = 0; k < n; ++k) {
    const double az = 2.0 * kPi * k / n + rng.uniform(-0.05, 0.05);
    const double el = deg2rad(rng.uniform(-elev_jitter_deg, elev_jitter_deg));
    const Vec3 eye = target + radius * Vec3{std::cos(az) * std::cos(el),
                                            std::sin(az) * std::cos(el),
                                            std::sin(el)};
    cams.push_back(look_at_camera(f, size, eye, target));
  }
  return cams;
}

/// Forces an actual float32 rounding. A plain (double)(float)x cast chain can
/// legally be elided by GCC's default excess-precision mode at -O3.
inline double round_through_float(double x) {
  volatile float f = static_cast<float>(x);
  return static_cast<double>(f);
}

inline Vec3 round_through_float(const Vec3& v) {
  return {round_through_float(v.x()), round_through_float(v.y()),
          round_through_float(v.z())};
}

inline double point_ray_distance(const Vec3& p, const Ray& r) {
  const Vec3 d = p - r.origin;
  return (d - d.dot(r.direction) * r.direction).norm();
}

inline double point_line_distance_px(Pixel p, const Vec3& line) {
  const double n = std::hypot(line.x(), line.y());
  return std::abs(line.x() * (p.x + 0.5) + line.y() * (p.y + 0.5) + line.z()) / n;
}

/// chi^2 upper critical values at p = 0.001 (standard tables); a test
/// statistic below the value means the null is not rejected at p > 0.001.
inline double chi2_crit_p001(int dof) {
  switch (dof) {
    case 1: return 10.828;
    case 9: return 27.877;
    case 31: return 61.098;
    default: return -1.0;  // add the table entry before using a new dof
  }
}

}  // namespace epitest
