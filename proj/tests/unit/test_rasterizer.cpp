#include <doctest.h>

#include <cmath>
#include <numbers>

#include "meshclick/rasterizer.hpp"
#include "support/oracles.hpp"

using namespace meshclick;

namespace {

Camera small_camera(double az, double el, int size = 48) {
  Camera c;
  c.azimuth = az;
  c.elevation = el;
  c.width = size;
  c.height = size;
  return c;
}

// Fraction of pixels where the rasterizer and the brute-force ray caster
// agree on the visible face; depth and barycentrics are compared there too.
double agreement(const Mesh& mesh, const Camera& cam, double& worst_depth, double& worst_bary) {
  const RasterOutput r = rasterize(mesh, cam);
  const Vec3 fwd = cam.forward();
  std::size_t same = 0;
  worst_depth = 0.0;
  worst_bary = 0.0;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
      const auto hit = oracle::cast_pixel(mesh, cam, x, y);
      const int expect = hit ? hit->face : kBackground;
      if (expect != r.face_id[pix]) continue;
      ++same;
      if (!hit) continue;
      const double f = 0.5 * cam.height / std::tan(0.5 * cam.fov_y);
      const double sx = (x + 0.5 - 0.5 * cam.width) / f;
      const double sy = (0.5 * cam.height - (y + 0.5)) / f;
      const Vec3 dir = (fwd + sx * cam.right() + sy * cam.up()).normalized();
      worst_depth = std::max(worst_depth, std::abs(hit->t * dir.dot(fwd) - r.depth[pix]));
      const auto& b = r.bary[pix];
      worst_bary = std::max({worst_bary, std::abs(b[0] - (1.0 - hit->u - hit->v)), std::abs(b[1] - hit->u),
                             std::abs(b[2] - hit->v)});
    }
  }
  return static_cast<double>(same) / r.pixel_count();
}

}  // namespace

TEST_CASE("camera frame is orthonormal and projects the origin to the centre") {
  const Camera c = small_camera(0.7, 0.3);
  CHECK(c.forward().norm() == doctest::Approx(1.0));
  CHECK(std::abs(c.forward().dot(c.right())) < 1e-12);
  CHECK(std::abs(c.forward().dot(c.up())) < 1e-12);
  CHECK(c.up().y() > 0.0);
  const auto p = project_point(c, Vec3::Zero());
  CHECK(p.x == doctest::Approx(24.0));
  CHECK(p.y == doctest::Approx(24.0));
  CHECK(p.depth == doctest::Approx(2.5));
  // Azimuth 0 looks down -z from +z; +x appears on the right and +y on top.
  const Camera front = small_camera(0.0, 0.0);
  CHECK(front.eye().z() == doctest::Approx(2.5));
  CHECK(project_point(front, Vec3(0.5, 0, 0)).x > 24.0);
  CHECK(project_point(front, Vec3(0, 0.5, 0)).y < 24.0);
}

TEST_CASE("camera validation") {
  Camera c;
  c.radius = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = Camera{};
  c.fov_y = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = Camera{};
  c.width = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = Camera{};
  c.elevation = std::numbers::pi / 2.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(Camera{}.validate());
}

TEST_CASE("rasterizer agrees with brute-force ray casting") {
  const Mesh sphere = make_icosphere(2);
  const Mesh table = make_table(600);
  for (const auto& [az, el] : {std::pair{0.3, 0.2}, std::pair{2.1, -0.7}, std::pair{4.4, 0.9}}) {
    double dd = 0.0;
    double db = 0.0;
    CHECK(agreement(sphere, small_camera(az, el), dd, db) > 0.995);
    CHECK(dd < 1e-9);
    CHECK(db < 1e-9);
    CHECK(agreement(table, small_camera(az, el), dd, db) > 0.995);
    CHECK(dd < 1e-9);
    CHECK(db < 1e-9);
  }
}

TEST_CASE("sphere coverage matches the projected disc area") {
  const Mesh sphere = make_icosphere(4);
  const Camera c = small_camera(0.4, 0.1, 200);
  const RasterOutput r = rasterize(sphere, c);
  const double radius_px = c.focal_length() / std::sqrt(c.radius * c.radius - 1.0);
  const double disc = std::numbers::pi * radius_px * radius_px;
  CHECK(static_cast<double>(r.covered_count()) == doctest::Approx(disc).epsilon(0.02));
  for (std::size_t p = 0; p < r.pixel_count(); ++p) {
    if (!r.covered(p)) {
      CHECK(std::isinf(r.depth[p]));
      continue;
    }
    const auto& b = r.bary[p];
    CHECK(b[0] + b[1] + b[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::min({b[0], b[1], b[2]}) >= -1e-12);
  }
}

TEST_CASE("pixel centres decide coverage") {
  // A screen-aligned triangle at depth 2.5 whose edge x = 10.5 passes exactly
  // through pixel centres: edge pixels count as covered.
  const Camera c = small_camera(0.0, 0.0, 32);
  const double f = c.focal_length();
  auto world = [&](double px, double py) { return Vec3((px - 16.0) * 2.5 / f, (16.0 - py) * 2.5 / f, 0.0); };
  const Mesh tri = make_mesh({world(10.5, 4.0), world(30.0, 4.0), world(10.5, 28.0)}, {{0, 1, 2}}, MeshOptions{false});
  const RasterOutput r = rasterize(tri, c);
  CHECK(r.face_id[10 * 32 + 10] == 0);
  CHECK(r.face_id[10 * 32 + 9] == kBackground);
  CHECK(r.face_id[2 * 32 + 15] == kBackground);
}

TEST_CASE("equal depth resolves to the lower face index") {
  std::vector<Vec3> v = {{-0.5, -0.5, 0}, {0.5, -0.5, 0}, {0, 0.5, 0}};
  const Mesh m = make_mesh(v, {{0, 1, 2}, {0, 1, 2}}, MeshOptions{false});
  const RasterOutput r = rasterize(m, small_camera(0.0, 0.0));
  CHECK(r.covered_count() > 0);
  for (auto f : r.face_id) CHECK((f == kBackground || f == 0));
}

TEST_CASE("no back-face culling") {
  std::vector<Vec3> v = {{-0.5, -0.5, 0}, {0.5, -0.5, 0}, {0, 0.5, 0}};
  const Mesh ccw = make_mesh(v, {{0, 1, 2}}, MeshOptions{false});
  const Mesh cw = make_mesh(v, {{0, 2, 1}}, MeshOptions{false});
  const Camera front = small_camera(0.0, 0.0);
  CHECK(rasterize(ccw, front).covered_count() == rasterize(cw, front).covered_count());
  CHECK(rasterize(ccw, small_camera(std::numbers::pi, 0.0)).covered_count() > 0);
}

TEST_CASE("faces crossing the eye plane are skipped") {
  std::vector<Vec3> v = {{-0.5, 0, 3.0}, {0.5, 0, 3.0}, {0, 0.5, 0}};
  const Mesh m = make_mesh(v, {{0, 1, 2}}, MeshOptions{false});
  const RasterOutput r = rasterize(m, small_camera(0.0, 0.0));
  CHECK(r.covered_count() == 0);
}

TEST_CASE("shading interpolates linear attributes exactly and its adjoint is shade_backward") {
  const Mesh m = make_icosphere(2);
  const Camera c = small_camera(1.0, 0.4);
  const RasterOutput r = rasterize(m, c);
  Matrix<double> pos(static_cast<Eigen::Index>(m.vertex_count()), 3);
  for (std::size_t v = 0; v < m.vertex_count(); ++v) pos.row(static_cast<Eigen::Index>(v)) = m.vertices[v].transpose();
  const auto img = shade_attributes<double>(r, pos, m.faces);
  for (std::size_t p = 0; p < r.pixel_count(); ++p) {
    if (!r.covered(p)) {
      CHECK(img.values.row(static_cast<Eigen::Index>(p)).norm() == 0.0);
      continue;
    }
    const Vec3 q = pixel_position(m, r, p);
    CHECK((img.values.row(static_cast<Eigen::Index>(p)).transpose() - q).norm() < 1e-12);
    // The interpolated point lies on the ray through the pixel centre.
    const auto sp = project_point(c, q);
    CHECK(sp.x == doctest::Approx(p % c.width + 0.5).epsilon(1e-9));
    CHECK(sp.y == doctest::Approx(p / c.width + 0.5).epsilon(1e-9));
  }

  const Matrix<double> attrs = oracle::random_matrix(static_cast<Eigen::Index>(m.vertex_count()), 4, 3);
  AttributeImage<double> g;
  g.width = r.width;
  g.height = r.height;
  g.values = oracle::random_matrix(static_cast<Eigen::Index>(r.pixel_count()), 4, 4);
  const double lhs = oracle::dot(shade_attributes<double>(r, attrs, m.faces).values, g.values);
  const double rhs = oracle::dot(attrs, shade_backward<double>(r, m.faces, g, m.vertex_count()));
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  Matrix<double> bg = Matrix<double>::Constant(1, 3, 7.0);
  const auto with_bg = shade_attributes<double>(r, pos, m.faces, bg);
  CHECK(with_bg.values(0, 0) == 7.0);
  CHECK_THROWS_AS(shade_attributes<double>(r, pos, m.faces, Matrix<double>::Zero(1, 2)), ShapeError);
}

TEST_CASE("colour render: white background, lit front") {
  const Mesh m = make_icosphere(3);
  const Camera c = small_camera(0.0, 0.0, 64);
  const auto img = render_color(m, c);
  CHECK(img.values.row(0).minCoeff() == 1.0);
  const auto centre = img.values.row(32 * 64 + 32);
  CHECK(centre(0) > 0.95);
  CHECK(img.values.minCoeff() >= kAmbient - 1e-12);
}

TEST_CASE("click projection on a sphere: front visible, back hidden, outside frame rejected") {
  const Mesh m = make_icosphere(3);
  const Camera c = small_camera(0.0, 0.0, 64);
  const RasterOutput r = rasterize(m, c);
  int front = -1;
  int back = -1;
  for (std::size_t v = 0; v < m.vertex_count(); ++v) {
    if (m.vertices[v].z() > 0.999) front = static_cast<int>(v);
    if (m.vertices[v].z() < -0.999) back = static_cast<int>(v);
  }
  REQUIRE(front >= 0);
  REQUIRE(back >= 0);
  const auto pf = project_click(m, c, r, front);
  CHECK(pf.visible);
  // The vertex projects onto the shared corner of four pixels.
  CHECK(std::abs(pf.x - 32) <= 1);
  CHECK(std::abs(pf.y - 32) <= 1);
  const auto pb = project_click(m, c, r, back);
  CHECK_FALSE(pb.visible);
  CHECK(pb.x >= 0);

  Camera zoom = c;
  zoom.radius = 1.2;
  zoom.fov_y = 0.2;
  const RasterOutput rz = rasterize(m, zoom);
  int side = -1;
  for (std::size_t v = 0; v < m.vertex_count(); ++v)
    if (m.vertices[v].x() > 0.999) side = static_cast<int>(v);
  const auto ps = project_click(m, zoom, rz, side);
  CHECK(ps.x == -1);
  CHECK_FALSE(ps.visible);
  CHECK_THROWS_AS(project_click(m, c, r, -1), std::out_of_range);
}

TEST_CASE("visible vertices match a brute-force occlusion test") {
  const Mesh m = make_table(600);
  for (const auto& [az, el] : {std::pair{0.5, 0.6}, std::pair{3.0, -0.4}}) {
    const Camera c = small_camera(az, el, 96);
    const RasterOutput r = rasterize(m, c);
    const auto vis = visible_vertices(m, c, r);
    std::vector<std::uint8_t> flag(m.vertex_count(), 0);
    for (auto v : vis) flag[static_cast<std::size_t>(v)] = 1;
    std::size_t agree = 0;
    const Vec3 eye = c.eye();
    for (std::size_t v = 0; v < m.vertex_count(); ++v) {
      const Vec3 to = m.vertices[v] - eye;
      const double dist = to.norm();
      bool occluded = false;
      for (const auto& f : m.faces) {
        if (f[0] == static_cast<int>(v) || f[1] == static_cast<int>(v) || f[2] == static_cast<int>(v)) continue;
        const auto hit = oracle::ray_triangle(eye, to / dist, m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
        if (hit && hit->first < dist - 1e-3 * c.radius) {
          occluded = true;
          break;
        }
      }
      const auto sp = project_point(c, m.vertices[v]);
      const bool in_frame = sp.x >= 0 && sp.y >= 0 && sp.x < c.width && sp.y < c.height;
      // A click needs a covered nearest pixel, so silhouette vertices whose
      // pixel centre misses the mesh count as not visible.
      const bool covered = in_frame && oracle::cast_pixel(m, c, static_cast<int>(std::floor(sp.x)),
                                                          static_cast<int>(std::floor(sp.y)))
                                           .has_value();
      if (flag[v] == static_cast<std::uint8_t>(covered && !occluded)) ++agree;
    }
    CHECK(static_cast<double>(agree) / m.vertex_count() > 0.97);
  }
}

TEST_CASE("active vertices are exactly those of covering faces") {
  const Mesh m = make_icosphere(2);
  const RasterOutput r = rasterize(m, small_camera(0.2, 0.2));
  const auto act = active_vertices(r, m.faces, m.vertex_count());
  std::vector<std::uint8_t> expect(m.vertex_count(), 0);
  for (auto f : r.face_id)
    if (f != kBackground)
      for (auto v : m.faces[f]) expect[v] = 1;
  std::size_t n = 0;
  for (auto e : expect) n += e;
  CHECK(act.size() == n);
  for (auto v : act) CHECK(expect[v] == 1);
  CHECK(n < m.vertex_count());
}

TEST_CASE("view sampler is deterministic and respects the policy") {
  ViewPolicy p;
  p.width = 32;
  p.height = 32;
  ViewSampler a(p, 9);
  ViewSampler b(p, 9);
  for (int i = 0; i < 50; ++i) {
    const Camera ca = a.next();
    const Camera cb = b.next();
    CHECK(ca.azimuth == cb.azimuth);
    CHECK(ca.elevation == cb.elevation);
    CHECK(ca.azimuth >= 0.0);
    CHECK(ca.azimuth < 2.0 * std::numbers::pi);
    CHECK(std::abs(ca.elevation) <= std::numbers::pi / 3.0);
    CHECK(ca.width == 32);
  }
}
