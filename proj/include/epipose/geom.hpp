#pragma once

#include "epipose/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

namespace epipose {

// Engine constants. All of them can be overridden per call; EngineConfig
// carries user overrides through the pipeline.
inline constexpr double kEpipolarBandPx = 0.7071067811865476;  // 0.5 * sqrt(2)
inline constexpr double kNearParallelDeg = 0.2;
inline constexpr double kEpipoleExclusionPx = 2.0;
inline constexpr double kMinBaseline = 1e-9;
inline constexpr double kMinDepth = 1e-9;

/// Pinhole camera for one crop. R_wc/t_wc map world (scene) points into the
/// camera frame: x_cam = R_wc * x + t_wc.
struct Camera {
  Mat3 K = Mat3::Identity();
  Mat3 R_wc = Mat3::Identity();
  Vec3 t_wc = Vec3::Zero();
  int width = 0;
  int height = 0;

  Vec3 center() const { return -R_wc.transpose() * t_wc; }
  Vec3 to_camera(const Vec3& x) const { return R_wc * x + t_wc; }
  bool contains(Pixel p) const {
    return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height;
  }
};

/// Rigid transform object frame -> scene frame.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& c) const { return R * c + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Pose compose(const Pose& rhs) const { return {R * rhs.R, R * rhs.t + t}; }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Rodrigues' formula, exp of the cross-product matrix of omega.
inline Mat3 rodrigues(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 w = skew(omega);
  if (theta < 1e-8) {
    return Mat3::Identity() + w + 0.5 * (w * w);
  }
  const double s = std::sin(theta) / theta;
  const double c = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + s * w + c * (w * w);
}

/// Geodesic rotation angle of R in radians.
inline double rotation_angle(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

inline double rotation_distance(const Mat3& a, const Mat3& b) {
  return rotation_angle(Mat3(a.transpose() * b));
}

inline bool is_rotation(const Mat3& r, double tol = 1e-9) {
  const Mat3 d = r.transpose() * r - Mat3::Identity();
  return d.cwiseAbs().maxCoeff() < tol && std::abs(r.determinant() - 1.0) < tol;
}

/// Perspective projection into continuous pixel coordinates. Fails when the
/// point is on or behind the camera plane.
inline Result<Vec2> project(const Camera& cam, const Vec3& x) {
  const Vec3 xc = cam.to_camera(x);
  if (xc.z() <= kMinDepth) return Err::BehindCamera;
  const Vec3 h = cam.K * xc;
  return Vec2{h.x() / h.z(), h.y() / h.z()};
}

/// Ray through a continuous pixel coordinate; direction is unit length.
/// For an integer pixel, pass its center (pixel_center).
inline Ray backproject(const Camera& cam, const Vec2& uv) {
  const Vec3 d_cam = cam.K.inverse() * Vec3{uv.x(), uv.y(), 1.0};
  Ray r;
  r.origin = cam.center();
  r.direction = (cam.R_wc.transpose() * d_cam).normalized();
  return r;
}

/// Fundamental matrix mapping homogeneous pixels of view i to epipolar lines
/// in view j: l_j = F * u_i, with u^T F u = 0 for corresponding pixels.
/// Normalized to unit Frobenius norm.
inline Result<Mat3> fundamental_matrix(const Camera& cam_i, const Camera& cam_j) {
  if ((cam_j.center() - cam_i.center()).norm() <= kMinBaseline)
    return Err::DegenerateBaseline;
  const Mat3 r_rel = cam_j.R_wc * cam_i.R_wc.transpose();
  const Vec3 t_rel = cam_j.t_wc - r_rel * cam_i.t_wc;
  const Mat3 e = skew(t_rel) * r_rel;
  Mat3 f = cam_j.K.inverse().transpose() * e * cam_i.K.inverse();
  const double n = f.norm();
  if (n <= 0.0) return Err::DegenerateBaseline;
  return Mat3(f / n);
}

/// Homogeneous epipole of view i seen in view j (projection of camera i's
/// center). Third component may be near zero (epipole at infinity).
inline Vec3 epipole_in_view(const Camera& cam_i, const Camera& cam_j) {
  return cam_j.K * cam_j.to_camera(cam_i.center());
}

/// Integer pixels of view j whose centers lie within band_px of the epipolar
/// line imposed by pixel u1 of view i, ordered monotonically along the line.
/// Pixels within epipole_px of the epipole are dropped: the line direction is
/// ill-conditioned there. An empty list means the line misses the crop.
inline Result<std::vector<Pixel>> epipolar_line_pixels(
    Pixel u1, const Camera& cam_i, const Camera& cam_j, const Mat3& f,
    double band_px = kEpipolarBandPx, double epipole_px = kEpipoleExclusionPx) {
  const Vec3 u1h{u1.x + 0.5, u1.y + 0.5, 1.0};
  const Vec3 l = f * u1h;
  const double n = std::hypot(l.x(), l.y());
  if (n < 1e-15) return Err::EpipoleInCrop;  // u1 sits on the epipole of view i
  const double a = l.x() / n, b = l.y() / n, c = l.z() / n;

  // Epipole of view j in continuous pixel coordinates, if finite.
  bool have_epipole = false;
  Vec2 epi{0, 0};
  const Vec3 eh = epipole_in_view(cam_i, cam_j);
  if (std::abs(eh.z()) > 1e-12 * std::max(std::abs(eh.x()), std::abs(eh.y()))) {
    epi = {eh.x() / eh.z(), eh.y() / eh.z()};
    have_epipole = true;
  }

  // Canonical direction along the line, fixed so traversal order is
  // reproducible regardless of the sign of l.
  Vec2 dir{-b, a};
  if (dir.x() < 0 || (dir.x() == 0 && dir.y() < 0)) dir = -dir;

  const int w = cam_j.width, h = cam_j.height;
  std::vector<std::pair<double, Pixel>> hits;
  auto consider = [&](int px, int py, double cx, double cy) {
    if (px < 0 || py < 0 || px >= w || py >= h) return;
    if (std::abs(a * cx + b * cy + c) > band_px) return;
    if (have_epipole && (Vec2{cx, cy} - epi).norm() <= epipole_px) return;
    hits.emplace_back(dir.x() * cx + dir.y() * cy, Pixel{px, py});
  };

  if (std::abs(b) >= std::abs(a)) {
    // Mostly horizontal: walk columns, few candidate rows per column.
    for (int px = 0; px < w; ++px) {
      const double cx = px + 0.5;
      const double ystar = -(a * cx + c) / b;
      const int py0 = static_cast<int>(std::floor(ystar - 0.5));
      for (int py = py0 - 1; py <= py0 + 2; ++py) consider(px, py, cx, py + 0.5);
    }
  } else {
    for (int py = 0; py < h; ++py) {
      const double cy = py + 0.5;
      const double xstar = -(b * cy + c) / a;
      const int px0 = static_cast<int>(std::floor(xstar - 0.5));
      for (int px = px0 - 1; px <= px0 + 2; ++px) consider(px, py, px + 0.5, cy);
    }
  }

  std::sort(hits.begin(), hits.end(), [](const auto& p, const auto& q) {
    if (p.first != q.first) return p.first < q.first;
    if (p.second.x != q.second.x) return p.second.x < q.second.x;
    return p.second.y < q.second.y;
  });
  std::vector<Pixel> out;
  out.reserve(hits.size());
  for (const auto& [t, px] : hits) out.push_back(px);
  return out;
}

inline Result<std::vector<Pixel>> epipolar_line_pixels(
    Pixel u1, const Camera& cam_i, const Camera& cam_j,
    double band_px = kEpipolarBandPx, double epipole_px = kEpipoleExclusionPx) {
  const auto f = fundamental_matrix(cam_i, cam_j);
  if (!f.ok()) return f.error();
  return epipolar_line_pixels(u1, cam_i, cam_j, *f, band_px, epipole_px);
}

/// Midpoint triangulation from two continuous pixel coordinates. Returns the
/// midpoint of the shortest segment between the back-projected rays.
inline Result<Vec3> triangulate(const Vec2& u1, const Camera& cam_i,
                                const Vec2& u2, const Camera& cam_j,
                                double min_angle_deg = kNearParallelDeg) {
  const Ray r1 = backproject(cam_i, u1);
  const Ray r2 = backproject(cam_j, u2);
  const double cosang = std::clamp(r1.direction.dot(r2.direction), -1.0, 1.0);
  if (std::acos(std::abs(cosang)) < deg2rad(min_angle_deg))
    return Err::NearParallelRays;

  // Closest points p1 = o1 + t1 d1, p2 = o2 + t2 d2 on the two rays.
  const Vec3 e = r2.origin - r1.origin;
  const double b = r1.direction.dot(r2.direction);
  const double d1e = r1.direction.dot(e);
  const double d2e = r2.direction.dot(e);
  const double denom = 1.0 - b * b;
  const double t1 = (d1e - b * d2e) / denom;
  const double t2 = (b * d1e - d2e) / denom;
  const Vec3 p1 = r1.origin + t1 * r1.direction;
  const Vec3 p2 = r2.origin + t2 * r2.direction;
  const Vec3 mid = 0.5 * (p1 + p2);

  if (cam_i.to_camera(mid).z() <= kMinDepth || cam_j.to_camera(mid).z() <= kMinDepth)
    return Err::NegativeDepth;
  return mid;
}

/// Least-squares proper rigid transform mapping objPts onto scenePts
/// (Kabsch). det(R) = +1 is enforced by flipping the smallest singular
/// vector; reflections are never returned.
inline Result<Pose> kabsch(std::span<const Vec3> obj_pts,
                           std::span<const Vec3> scene_pts) {
  const std::size_t n = obj_pts.size();
  Vec3 co = Vec3::Zero(), cs = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    co += obj_pts[i];
    cs += scene_pts[i];
  }
  co /= double(n);
  cs /= double(n);

  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < n; ++i)
    h += (obj_pts[i] - co) * (scene_pts[i] - cs).transpose();

  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // Rank < 2 (colinear points): the rotation about the common axis is free.
  if (sv(1) <= 1e-9 * sv(0) || sv(0) <= 0.0) return Err::DegenerateTriplet;

  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  const double d = (v * u.transpose()).determinant();
  Mat3 s = Mat3::Identity();
  s(2, 2) = d < 0 ? -1.0 : 1.0;
  Pose p;
  p.R = v * s * u.transpose();
  p.t = cs - p.R * co;
  return p;
}

/// Left-multiplicative SE(3) perturbation: R' = exp([w]x) R, t' = t + v.
inline Pose se3_perturb(const Pose& pose, const Vec6& delta) {
  Pose out;
  out.R = rodrigues(delta.head<3>()) * pose.R;
  out.t = pose.t + delta.tail<3>();
  return out;
}

}  // namespace epipose
