#pragma once

#include "epipose/core.hpp"
#include "epipose/geom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace epipose {

/// Proper rigid transform declared as an object symmetry.
struct SymmetryTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  Vec3 apply(const Vec3& v) const { return R * v + t; }
};

/// Triangle mesh plus the metadata the metrics need. `diameter` is the
/// maximum pairwise vertex distance; `symmetries` always includes the
/// identity.
struct ObjectModel {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  double diameter = 0.0;
  std::vector<SymmetryTransform> symmetries{SymmetryTransform{}};

  double compute_diameter() const {
    double d = 0.0;
    for (std::size_t i = 0; i < vertices.size(); ++i)
      for (std::size_t j = i + 1; j < vertices.size(); ++j)
        d = std::max(d, (vertices[i] - vertices[j]).norm());
    return d;
  }
};

/// Estimated mask, per-pixel object coordinates and camera-space depth for
/// one pose in one view. coords/depth are only valid where mask is true.
struct RenderedView {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> mask;
  std::vector<Vec3> coords;
  std::vector<double> depth;

  std::size_t index(Pixel p) const { return std::size_t(p.y) * width + p.x; }
  bool mask_at(Pixel p) const { return mask[index(p)] != 0; }
  const Vec3& coord_at(Pixel p) const { return coords[index(p)]; }
  double depth_at(Pixel p) const { return depth[index(p)]; }
  std::size_t mask_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

namespace detail {

struct ClipVertex {
  Vec3 cam;  // camera-frame position
  Vec3 obj;  // object-frame coordinate (affine in camera space)
};

/// Sutherland-Hodgman clip of a polygon against z >= z_near. The object
/// coordinate is interpolated with the same parameter; the object-to-camera
/// map is affine, so linear interpolation is exact.
inline int clip_near(const ClipVertex* in, int n, double z_near,
                     ClipVertex* out) {
  int m = 0;
  for (int i = 0; i < n; ++i) {
    const ClipVertex& a = in[i];
    const ClipVertex& b = in[(i + 1) % n];
    const bool ain = a.cam.z() >= z_near;
    const bool bin = b.cam.z() >= z_near;
    if (ain) out[m++] = a;
    if (ain != bin) {
      const double t = (z_near - a.cam.z()) / (b.cam.z() - a.cam.z());
      out[m++] = {a.cam + t * (b.cam - a.cam), a.obj + t * (b.obj - a.obj)};
    }
  }
  return m;
}

// Top-left fill rule: a pixel center exactly on an edge belongs to the
// triangle only if that edge is a top edge or a left edge (y grows downward).
inline bool edge_is_top_left(const Vec2& a, const Vec2& b) {
  const double dx = b.x() - a.x();
  const double dy = b.y() - a.y();
  return dy < 0.0 || (dy == 0.0 && dx > 0.0);
}

}  // namespace detail

/// Z-buffered rasterization of the posed mesh into the crop camera with
/// perspective-correct interpolation of object-frame coordinates. Pixels are
/// covered when their center lies inside a projected triangle; back faces are
/// not culled (CAD meshes are not reliably wound), the z-buffer orders them.
inline RenderedView render_pose(const ObjectModel& model, const Pose& pose,
                                const Camera& camera) {
  RenderedView rv;
  rv.width = camera.width;
  rv.height = camera.height;
  const std::size_t n = std::size_t(camera.width) * camera.height;
  rv.mask.assign(n, 0);
  rv.coords.assign(n, Vec3::Zero());
  rv.depth.assign(n, std::numeric_limits<double>::infinity());

  constexpr double kZNear = 1e-9;
  const double fx = camera.K(0, 0), fy = camera.K(1, 1);
  const double skew = camera.K(0, 1);
  const double cx = camera.K(0, 2), cy = camera.K(1, 2);

  std::vector<Vec3> cam_verts(model.vertices.size());
  for (std::size_t i = 0; i < model.vertices.size(); ++i)
    cam_verts[i] = camera.to_camera(pose.apply(model.vertices[i]));

  detail::ClipVertex poly_in[3], poly_out[4];
  for (const auto& tri : model.triangles) {
    for (int k = 0; k < 3; ++k)
      poly_in[k] = {cam_verts[tri[k]], model.vertices[tri[k]]};
    const int m = detail::clip_near(poly_in, 3, kZNear, poly_out);
    if (m < 3) continue;

    // Fan-triangulate the clipped polygon (triangle or quad).
    for (int f = 1; f + 1 < m; ++f) {
      const detail::ClipVertex sub[3] = {poly_out[0], poly_out[f],
                                         poly_out[f + 1]};
      Vec2 p[3];
      double inv_z[3];
      Vec3 obj_over_z[3];
      for (int k = 0; k < 3; ++k) {
        const Vec3& c = sub[k].cam;
        p[k] = {(fx * c.x() + skew * c.y()) / c.z() + cx,
                fy * c.y() / c.z() + cy};
        inv_z[k] = 1.0 / c.z();
        obj_over_z[k] = sub[k].obj * inv_z[k];
      }

      double area2 = (p[1].x() - p[0].x()) * (p[2].y() - p[0].y()) -
                     (p[1].y() - p[0].y()) * (p[2].x() - p[0].x());
      int i0 = 0, i1 = 1, i2 = 2;
      if (area2 < 0.0) {
        std::swap(i1, i2);
        area2 = -area2;
      }
      if (area2 == 0.0) continue;
      const Vec2 v0 = p[i0], v1 = p[i1], v2 = p[i2];

      const int x_min = std::max(0, int(std::floor(std::min({v0.x(), v1.x(), v2.x()}) - 0.5)));
      const int x_max = std::min(camera.width - 1, int(std::ceil(std::max({v0.x(), v1.x(), v2.x()}))));
      const int y_min = std::max(0, int(std::floor(std::min({v0.y(), v1.y(), v2.y()}) - 0.5)));
      const int y_max = std::min(camera.height - 1, int(std::ceil(std::max({v0.y(), v1.y(), v2.y()}))));

      const bool tl0 = detail::edge_is_top_left(v1, v2);
      const bool tl1 = detail::edge_is_top_left(v2, v0);
      const bool tl2 = detail::edge_is_top_left(v0, v1);

      auto edge = [](const Vec2& a, const Vec2& b, double px, double py) {
        return (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
      };

      for (int y = y_min; y <= y_max; ++y) {
        const double py = y + 0.5;
        for (int x = x_min; x <= x_max; ++x) {
          const double px = x + 0.5;
          const double w0 = edge(v1, v2, px, py);
          const double w1 = edge(v2, v0, px, py);
          const double w2 = edge(v0, v1, px, py);
          const bool in0 = w0 > 0.0 || (w0 == 0.0 && tl0);
          const bool in1 = w1 > 0.0 || (w1 == 0.0 && tl1);
          const bool in2 = w2 > 0.0 || (w2 == 0.0 && tl2);
          if (!(in0 && in1 && in2)) continue;

          const double b0 = w0 / area2, b1 = w1 / area2, b2 = w2 / area2;
          const double izp = b0 * inv_z[i0] + b1 * inv_z[i1] + b2 * inv_z[i2];
          const double z = 1.0 / izp;
          const std::size_t idx = std::size_t(y) * camera.width + x;
          if (z >= rv.depth[idx]) continue;
          rv.depth[idx] = z;
          rv.mask[idx] = 1;
          rv.coords[idx] = (b0 * obj_over_z[i0] + b1 * obj_over_z[i1] +
                            b2 * obj_over_z[i2]) * z;
        }
      }
    }
  }
  return rv;
}

/// Every stride-th masked pixel in row-major order with its object
/// coordinate. stride = 1 returns all masked pixels.
inline std::vector<std::pair<Pixel, Vec3>> visibility_subset(
    const RenderedView& rv, int stride) {
  std::vector<std::pair<Pixel, Vec3>> out;
  std::size_t seen = 0;
  for (int y = 0; y < rv.height; ++y)
    for (int x = 0; x < rv.width; ++x) {
      const Pixel p{x, y};
      if (!rv.mask_at(p)) continue;
      if (seen % stride == 0) out.emplace_back(p, rv.coord_at(p));
      ++seen;
    }
  return out;
}

}  // namespace epipose
