#include "meshclick/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace meshclick {

namespace {

constexpr double kNearPlane = 1e-6;

double edge(const ScreenPoint& a, const ScreenPoint& b, double px, double py) {
  return (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
}

// Screen-space barycentrics of (px, py); false for degenerate triangles.
bool screen_bary(const std::array<ScreenPoint, 3>& s, double px, double py, std::array<double, 3>& lambda) {
  const double area = edge(s[0], s[1], s[2].x, s[2].y);
  if (area == 0.0) return false;
  lambda[0] = edge(s[1], s[2], px, py) / area;
  lambda[1] = edge(s[2], s[0], px, py) / area;
  lambda[2] = edge(s[0], s[1], px, py) / area;
  return true;
}

}  // namespace

Vec3 Camera::eye() const {
  return radius * Vec3(std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
                       std::cos(elevation) * std::cos(azimuth));
}

Vec3 Camera::forward() const { return (-eye()).normalized(); }

Vec3 Camera::right() const { return forward().cross(Vec3::UnitY()).normalized(); }

Vec3 Camera::up() const { return right().cross(forward()); }

double Camera::focal_length() const { return 0.5 * height / std::tan(0.5 * fov_y); }

void Camera::validate() const {
  if (!(radius > 1.0)) throw std::invalid_argument("camera radius must exceed 1");
  if (!(fov_y > 0.0 && fov_y < std::numbers::pi)) throw std::invalid_argument("camera fov_y must be in (0, pi)");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
  if (std::abs(std::cos(elevation)) < 1e-9) throw std::invalid_argument("camera elevation at a pole");
}

ScreenPoint project_point(const Camera& cam, const Vec3& p) {
  const Vec3 rel = p - cam.eye();
  const double xc = rel.dot(cam.right());
  const double yc = rel.dot(cam.up());
  const double zc = rel.dot(cam.forward());
  const double f = cam.focal_length();
  return {0.5 * cam.width + f * xc / zc, 0.5 * cam.height - f * yc / zc, zc};
}

std::size_t RasterOutput::covered_count() const {
  return static_cast<std::size_t>(std::count_if(face_id.begin(), face_id.end(), [](auto f) { return f != kBackground; }));
}

std::vector<std::uint8_t> RasterOutput::coverage() const {
  std::vector<std::uint8_t> out(face_id.size());
  for (std::size_t i = 0; i < face_id.size(); ++i) out[i] = face_id[i] != kBackground;
  return out;
}

RasterOutput rasterize(const Mesh& mesh, const Camera& cam) {
  cam.validate();
  RasterOutput out;
  out.width = cam.width;
  out.height = cam.height;
  const std::size_t pixels = static_cast<std::size_t>(cam.width) * cam.height;
  out.face_id.assign(pixels, kBackground);
  out.bary.assign(pixels, {0.0, 0.0, 0.0});
  out.depth.assign(pixels, std::numeric_limits<double>::infinity());

  // Camera frame computed once; project_point() recomputes it per call.
  const Vec3 eye = cam.eye();
  const Vec3 fwd = cam.forward();
  const Vec3 right = cam.right();
  const Vec3 up = right.cross(fwd);
  const double focal = cam.focal_length();
  std::vector<ScreenPoint> screen(mesh.vertex_count());
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
    const Vec3 rel = mesh.vertices[v] - eye;
    const double zc = rel.dot(fwd);
    screen[v] = {0.5 * cam.width + focal * rel.dot(right) / zc, 0.5 * cam.height - focal * rel.dot(up) / zc, zc};
  }
  out.face_screen.resize(mesh.face_count());

  for (std::size_t fi = 0; fi < mesh.face_count(); ++fi) {
    const Face& f = mesh.faces[fi];
    const std::array<ScreenPoint, 3> s = {screen[f[0]], screen[f[1]], screen[f[2]]};
    out.face_screen[fi] = s;
    if (s[0].depth <= kNearPlane || s[1].depth <= kNearPlane || s[2].depth <= kNearPlane) continue;
    const double min_x = std::min({s[0].x, s[1].x, s[2].x});
    const double max_x = std::max({s[0].x, s[1].x, s[2].x});
    const double min_y = std::min({s[0].y, s[1].y, s[2].y});
    const double max_y = std::max({s[0].y, s[1].y, s[2].y});
    const int x0 = std::max(0, static_cast<int>(std::ceil(min_x - 0.5)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(max_x - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(min_y - 0.5)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(max_y - 0.5)));
    if (x0 > x1 || y0 > y1) continue;
    const double area = edge(s[0], s[1], s[2].x, s[2].y);
    if (area == 0.0) continue;
    const double inv_area = 1.0 / area;
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        const double l0 = edge(s[1], s[2], px, py) * inv_area;
        const double l1 = edge(s[2], s[0], px, py) * inv_area;
        const double l2 = edge(s[0], s[1], px, py) * inv_area;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        const double w0 = l0 / s[0].depth;
        const double w1 = l1 / s[1].depth;
        const double w2 = l2 / s[2].depth;
        const double inv_z = w0 + w1 + w2;
        const double depth = 1.0 / inv_z;
        const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
        if (depth < out.depth[pix]) {
          out.depth[pix] = depth;
          out.face_id[pix] = static_cast<std::int32_t>(fi);
          out.bary[pix] = {w0 * depth, w1 * depth, w2 * depth};
        }
      }
    }
  }
  return out;
}

template <class T>
AttributeImage<T> shade_attributes(const RasterOutput& raster, const Matrix<T>& attrs,
                                   std::span<const Face> faces, const Matrix<T>& background) {
  const Eigen::Index d = attrs.cols();
  if (background.size() != 0 && (background.rows() != 1 || background.cols() != d)) {
    throw ShapeError("shade_attributes: background must be 1 x channels");
  }
  AttributeImage<T> img;
  img.width = raster.width;
  img.height = raster.height;
  img.values.resize(static_cast<Eigen::Index>(raster.pixel_count()), d);
  for (std::size_t pix = 0; pix < raster.pixel_count(); ++pix) {
    const auto row = static_cast<Eigen::Index>(pix);
    const auto fid = raster.face_id[pix];
    if (fid == kBackground) {
      if (background.size() != 0) {
        img.values.row(row) = background.row(0);
      } else {
        img.values.row(row).setZero();
      }
      continue;
    }
    const Face& f = faces[static_cast<std::size_t>(fid)];
    for (auto vid : f) {
      if (vid >= attrs.rows()) throw ShapeError("shade_attributes: attribute rows do not cover mesh vertices");
    }
    const auto& b = raster.bary[pix];
    img.values.row(row) = static_cast<T>(b[0]) * attrs.row(f[0]) + static_cast<T>(b[1]) * attrs.row(f[1]) +
                          static_cast<T>(b[2]) * attrs.row(f[2]);
  }
  return img;
}

template <class T>
Matrix<T> shade_backward(const RasterOutput& raster, std::span<const Face> faces,
                         const AttributeImage<T>& grad_image, std::size_t vertex_count) {
  if (grad_image.width != raster.width || grad_image.height != raster.height ||
      grad_image.values.rows() != static_cast<Eigen::Index>(raster.pixel_count())) {
    throw ShapeError("shade_backward: gradient image does not match raster");
  }
  Matrix<T> grad = Matrix<T>::Zero(static_cast<Eigen::Index>(vertex_count), grad_image.channels());
  for (std::size_t pix = 0; pix < raster.pixel_count(); ++pix) {
    const auto fid = raster.face_id[pix];
    if (fid == kBackground) continue;
    const Face& f = faces[static_cast<std::size_t>(fid)];
    const auto& b = raster.bary[pix];
    const auto g = grad_image.values.row(static_cast<Eigen::Index>(pix));
    for (int k = 0; k < 3; ++k) grad.row(f[k]) += static_cast<T>(b[k]) * g;
  }
  return grad;
}

Vec3 pixel_normal(const Mesh& mesh, const RasterOutput& raster, std::size_t pixel) {
  const Face& f = mesh.faces[static_cast<std::size_t>(raster.face_id[pixel])];
  const auto& b = raster.bary[pixel];
  const Vec3 n = b[0] * mesh.vertex_normals[f[0]] + b[1] * mesh.vertex_normals[f[1]] + b[2] * mesh.vertex_normals[f[2]];
  const double len = n.norm();
  return len > 0.0 ? Vec3(n / len) : mesh.vertex_normals[f[0]];
}

Vec3 pixel_position(const Mesh& mesh, const RasterOutput& raster, std::size_t pixel) {
  const Face& f = mesh.faces[static_cast<std::size_t>(raster.face_id[pixel])];
  const auto& b = raster.bary[pixel];
  return b[0] * mesh.vertices[f[0]] + b[1] * mesh.vertices[f[1]] + b[2] * mesh.vertices[f[2]];
}

AttributeImage<double> render_color(const Mesh& mesh, const Camera& cam, const RasterOutput& raster) {
  AttributeImage<double> img;
  img.width = raster.width;
  img.height = raster.height;
  img.values = Matrix<double>::Ones(static_cast<Eigen::Index>(raster.pixel_count()), 3);
  const Vec3 light = cam.eye().normalized();
  for (std::size_t pix = 0; pix < raster.pixel_count(); ++pix) {
    if (!raster.covered(pix)) continue;
    const double lambert = std::max(0.0, pixel_normal(mesh, raster, pix).dot(light));
    img.values.row(static_cast<Eigen::Index>(pix)).setConstant(kAmbient + (1.0 - kAmbient) * lambert);
  }
  return img;
}

AttributeImage<double> render_color(const Mesh& mesh, const Camera& cam) {
  return render_color(mesh, cam, rasterize(mesh, cam));
}

ClickProjection project_click(const Mesh& mesh, const Camera& cam, const RasterOutput& raster,
                              std::int32_t vid) {
  if (vid < 0 || static_cast<std::size_t>(vid) >= mesh.vertex_count()) {
    throw std::out_of_range("project_click: vertex " + std::to_string(vid) + " out of range");
  }
  const ScreenPoint sp = project_point(cam, mesh.vertices[vid]);
  if (sp.depth <= kNearPlane) return {};
  const double fx = std::floor(sp.x);
  const double fy = std::floor(sp.y);
  if (fx < 0.0 || fy < 0.0 || fx >= raster.width || fy >= raster.height) return {};
  ClickProjection out{static_cast<int>(fx), static_cast<int>(fy), false};
  const std::size_t pix = static_cast<std::size_t>(out.y) * raster.width + out.x;
  const auto fid = raster.face_id[pix];
  if (fid == kBackground) return out;
  std::array<double, 3> lambda{};
  double surface_depth = raster.depth[pix];
  if (screen_bary(raster.face_screen[static_cast<std::size_t>(fid)], sp.x, sp.y, lambda)) {
    const auto& s = raster.face_screen[static_cast<std::size_t>(fid)];
    const double inv_z = lambda[0] / s[0].depth + lambda[1] / s[1].depth + lambda[2] / s[2].depth;
    if (inv_z > 0.0) surface_depth = 1.0 / inv_z;
  }
  out.visible = sp.depth <= surface_depth + 1e-3 * cam.radius;
  return out;
}

std::vector<std::int32_t> visible_vertices(const Mesh& mesh, const Camera& cam, const RasterOutput& raster) {
  std::vector<std::int32_t> out;
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
    if (project_click(mesh, cam, raster, static_cast<std::int32_t>(v)).visible) {
      out.push_back(static_cast<std::int32_t>(v));
    }
  }
  return out;
}

std::vector<std::int32_t> active_vertices(const RasterOutput& raster, std::span<const Face> faces,
                                          std::size_t vertex_count) {
  std::vector<std::uint8_t> used(vertex_count, 0);
  std::vector<std::uint8_t> face_seen(faces.size(), 0);
  for (auto fid : raster.face_id) {
    if (fid == kBackground || face_seen[static_cast<std::size_t>(fid)]) continue;
    face_seen[static_cast<std::size_t>(fid)] = 1;
    for (auto v : faces[static_cast<std::size_t>(fid)]) used[static_cast<std::size_t>(v)] = 1;
  }
  std::vector<std::int32_t> out;
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (used[v]) out.push_back(static_cast<std::int32_t>(v));
  }
  return out;
}

Camera ViewSampler::next() {
  Camera cam;
  cam.azimuth = rng_.uniform(0.0, 2.0 * std::numbers::pi);
  cam.elevation = rng_.uniform(policy_.elevation_min, policy_.elevation_max);
  cam.radius = policy_.radius;
  cam.fov_y = policy_.fov_y;
  cam.width = policy_.width;
  cam.height = policy_.height;
  return cam;
}

template AttributeImage<float> shade_attributes(const RasterOutput&, const Matrix<float>&, std::span<const Face>,
                                                const Matrix<float>&);
template AttributeImage<double> shade_attributes(const RasterOutput&, const Matrix<double>&, std::span<const Face>,
                                                 const Matrix<double>&);
template Matrix<float> shade_backward(const RasterOutput&, std::span<const Face>, const AttributeImage<float>&,
                                      std::size_t);
template Matrix<double> shade_backward(const RasterOutput&, std::span<const Face>, const AttributeImage<double>&,
                                       std::size_t);

}  // namespace meshclick
