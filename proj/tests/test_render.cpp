#include "epipose/render.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace epipose;
using namespace epitest;

namespace {

ObjectModel make_box(double sx, double sy, double sz) {
  ObjectModel m;
  const double hx = sx / 2, hy = sy / 2, hz = sz / 2;
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back(Vec3{(i & 1) ? hx : -hx, (i & 2) ? hy : -hy,
                              (i & 4) ? hz : -hz});
  const int quads[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1},
                           {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  for (const auto& q : quads) {
    m.triangles.push_back({q[0], q[1], q[2]});
    m.triangles.push_back({q[0], q[2], q[3]});
  }
  m.diameter = m.compute_diameter();
  return m;
}

/// Moller-Trumbore ray-triangle intersection; returns the ray parameter of
/// the nearest hit across the whole mesh, or infinity.
double raycast_mesh(const ObjectModel& model, const Pose& pose, const Ray& ray) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& tri : model.triangles) {
    const Vec3 a = pose.apply(model.vertices[tri[0]]);
    const Vec3 b = pose.apply(model.vertices[tri[1]]);
    const Vec3 c = pose.apply(model.vertices[tri[2]]);
    const Vec3 e1 = b - a, e2 = c - a;
    const Vec3 pv = ray.direction.cross(e2);
    const double det = e1.dot(pv);
    if (std::abs(det) < 1e-14) continue;
    const Vec3 tv = ray.origin - a;
    const double u = tv.dot(pv) / det;
    if (u < 0 || u > 1) continue;
    const Vec3 qv = tv.cross(e1);
    const double v = ray.direction.dot(qv) / det;
    if (v < 0 || u + v > 1) continue;
    const double t = e2.dot(qv) / det;
    if (t > 1e-12) best = std::min(best, t);
  }
  return best;
}

}  // namespace

TEST_CASE("axis-aligned cube renders a centered square mask", "[render]") {
  const ObjectModel cube = make_box(1, 1, 1);
  const Camera cam = make_camera(100, 50, 50, 100, 100);
  Pose pose;
  pose.t = Vec3{0, 0, 10};
  const RenderedView rv = render_pose(cube, pose, cam);
  REQUIRE(rv.mask_count() > 0);
  int x0 = 1000, x1 = -1, y0 = 1000, y1 = -1;
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x)
      if (rv.mask_at({x, y})) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  // Pinhole size of the unit face at depth ~10 is K00 * (1/10) = 10 px.
  CHECK(std::abs((x1 - x0 + 1) - 10.0) <= 1.5);
  CHECK(std::abs((y1 - y0 + 1) - 10.0) <= 1.5);
  CHECK(std::abs((x0 + x1) / 2.0 - 49.5) <= 1.0);  // centered on the axis
  CHECK(std::abs((y0 + y1) / 2.0 - 49.5) <= 1.0);
  // The silhouette of an axis-aligned cube seen head-on is a filled square.
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) CHECK(rv.mask_at({x, y}));
}

TEST_CASE("object behind the camera renders an empty mask", "[render]") {
  const ObjectModel cube = make_box(1, 1, 1);
  const Camera cam = make_camera(100, 50, 50, 100, 100);
  Pose pose;
  pose.t = Vec3{0, 0, -10};
  const RenderedView rv = render_pose(cube, pose, cam);
  CHECK(rv.mask_count() == 0);
}

TEST_CASE("depth test matches a ray-cast oracle", "[render]") {
  Rng rng(1);
  const ObjectModel box = make_box(1.0, 0.7, 0.45);
  for (int trial = 0; trial < 3; ++trial) {
    Pose pose;
    pose.R = rng.uniform_rotation();
    pose.t = Vec3{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 8.0};
    const Camera cam = make_camera(150, 32, 32, 64, 64);
    const RenderedView rv = render_pose(box, pose, cam);
    REQUIRE(rv.mask_count() > 50);

    std::vector<Pixel> masked;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (rv.mask_at({x, y})) masked.push_back({x, y});
    int checked = 0;
    for (int i = 0; i < 100; ++i) {
      const Pixel p = masked[rng.uniform_index(masked.size())];
      ++checked;
      const Ray ray = backproject(cam, pixel_center(p));
      const double t = raycast_mesh(box, pose, ray);
      REQUIRE(std::isfinite(t));
      const Vec3 hit = ray.origin + t * ray.direction;
      const double z_oracle = cam.to_camera(hit).z();
      CHECK(std::abs(rv.depth_at(p) - z_oracle) < 1e-3 * box.diameter);
      // Nearer-face coordinates win: the rendered coordinate transformed by
      // the pose must sit at the oracle hit point, not on a hidden face.
      CHECK((pose.apply(rv.coord_at(p)) - hit).norm() < 2e-3 * box.diameter);
    }
    REQUIRE(checked == 100);
  }
}

TEST_CASE("mask is invariant under vertex permutation", "[render]") {
  Rng rng(2);
  const ObjectModel box = make_box(0.8, 0.5, 0.3);
  Pose pose;
  pose.R = rng.uniform_rotation();
  pose.t = Vec3{0, 0, 6};
  const Camera cam = make_camera(120, 32, 32, 64, 64);

  // Reverse the vertex array and remap triangle indices.
  ObjectModel perm = box;
  const int n = static_cast<int>(box.vertices.size());
  for (int i = 0; i < n; ++i) perm.vertices[i] = box.vertices[n - 1 - i];
  for (auto& t : perm.triangles)
    for (int& idx : t) idx = n - 1 - idx;

  const RenderedView a = render_pose(box, pose, cam);
  const RenderedView b = render_pose(perm, pose, cam);
  CHECK(a.mask == b.mask);
}

TEST_CASE("rendered coordinates reproject onto their own pixel", "[render]") {
  Rng rng(3);
  const ObjectModel box = make_box(1.0, 0.6, 0.4);
  for (int trial = 0; trial < 3; ++trial) {
    Pose pose;
    pose.R = rng.uniform_rotation();
    pose.t = Vec3{0, 0, 7};
    const Camera cam = make_camera(130, 32, 32, 64, 64);
    const RenderedView rv = render_pose(box, pose, cam);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const Pixel p{x, y};
        if (!rv.mask_at(p)) continue;
        const auto uv = project(cam, pose.apply(rv.coord_at(p)));
        REQUIRE(uv.ok());
        CHECK((*uv - pixel_center(p)).norm() <= 1.0);
      }
  }
}

TEST_CASE("shared triangle edges are covered exactly once", "[render]") {
  // Two triangles forming a quad, rendered one at a time: with the top-left
  // fill rule no pixel belongs to both and none in the interior is lost.
  const Camera cam = make_camera(80, 32, 32, 64, 64);
  ObjectModel t1, t2, quad;
  const Vec3 a{-0.4, -0.35, 0}, b{0.45, -0.3, 0}, c{0.4, 0.42, 0},
      d{-0.42, 0.38, 0};
  t1.vertices = {a, b, c};
  t1.triangles = {{0, 1, 2}};
  t1.diameter = 1;
  t2.vertices = {a, c, d};
  t2.triangles = {{0, 1, 2}};
  t2.diameter = 1;
  quad.vertices = {a, b, c, d};
  quad.triangles = {{0, 1, 2}, {0, 2, 3}};
  quad.diameter = 1;
  Pose pose;
  pose.t = Vec3{0, 0, 2};
  const RenderedView r1 = render_pose(t1, pose, cam);
  const RenderedView r2 = render_pose(t2, pose, cam);
  const RenderedView rq = render_pose(quad, pose, cam);
  REQUIRE(rq.mask_count() > 100);
  for (std::size_t i = 0; i < rq.mask.size(); ++i) {
    CHECK(int(r1.mask[i]) + int(r2.mask[i]) == int(rq.mask[i]));
  }
}

TEST_CASE("visibility_subset follows the stride contract", "[render]") {
  RenderedView rv;
  rv.width = 20;
  rv.height = 10;
  rv.mask.assign(200, 0);
  rv.coords.assign(200, Vec3::Zero());
  rv.depth.assign(200, 1.0);

  CHECK(visibility_subset(rv, 1).empty());

  // 100 masked pixels.
  for (int i = 0; i < 100; ++i) rv.mask[i * 2] = 1;
  CHECK(visibility_subset(rv, 1).size() == rv.mask_count());
  CHECK(visibility_subset(rv, 4).size() == 25);
}
