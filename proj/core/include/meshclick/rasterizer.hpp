#pragma once

#include <array>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "meshclick/geometry.hpp"
#include "meshclick/numerics.hpp"
#include "meshclick/random.hpp"

namespace meshclick {

// Orbit camera looking at the origin with +y up.
struct Camera {
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 2.5;
  double fov_y = std::numbers::pi / 3.0;
  int width = 224;
  int height = 224;

  Vec3 eye() const;
  // Unit vectors of the camera frame; forward points from the eye to the origin.
  Vec3 forward() const;
  Vec3 right() const;
  Vec3 up() const;
  double focal_length() const;  // in pixels
  // Throws std::invalid_argument when radius <= 1, fov outside (0, pi) or a
  // non-positive image size.
  void validate() const;
};

struct ScreenPoint {
  double x = 0.0;      // continuous pixel coordinates; pixel (i, j) covers [i, i+1) x [j, j+1)
  double y = 0.0;
  double depth = 0.0;  // eye-space distance along the viewing axis
};

ScreenPoint project_point(const Camera& cam, const Vec3& p);

inline constexpr std::int32_t kBackground = -1;

struct RasterOutput {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> face_id;            // kBackground where uncovered
  std::vector<std::array<double, 3>> bary;      // perspective-correct, sums to 1 where covered
  std::vector<double> depth;                    // +inf where uncovered
  std::vector<std::array<ScreenPoint, 3>> face_screen;  // per-face projected corners

  std::size_t pixel_count() const { return face_id.size(); }
  bool covered(std::size_t pixel) const { return face_id[pixel] != kBackground; }
  std::size_t covered_count() const;
  std::vector<std::uint8_t> coverage() const;
};

// Hard z-buffer rasterization at pixel centers (x + 0.5, y + 0.5), no culling.
// On exactly equal depth the lower face index wins.
RasterOutput rasterize(const Mesh& mesh, const Camera& cam);

template <class T>
struct AttributeImage {
  int width = 0;
  int height = 0;
  Matrix<T> values;  // (height * width) x channels, row = y * width + x

  Eigen::Index channels() const { return values.cols(); }
};

// Barycentric interpolation of per-vertex attribute rows; uncovered pixels
// take `background` (1 x d, or empty for zeros).
template <class T>
AttributeImage<T> shade_attributes(const RasterOutput& raster, const Matrix<T>& attrs,
                                   std::span<const Face> faces, const Matrix<T>& background = {});

// Adjoint of shade_attributes with respect to the vertex attributes.
template <class T>
Matrix<T> shade_backward(const RasterOutput& raster, std::span<const Face> faces,
                         const AttributeImage<T>& grad_image, std::size_t vertex_count);

inline constexpr double kAmbient = 0.2;

// Gray Lambertian shading, light along the viewing direction, white background.
AttributeImage<double> render_color(const Mesh& mesh, const Camera& cam, const RasterOutput& raster);
AttributeImage<double> render_color(const Mesh& mesh, const Camera& cam);

// Interpolated, renormalized vertex normal of a covered pixel.
Vec3 pixel_normal(const Mesh& mesh, const RasterOutput& raster, std::size_t pixel);
// World-space surface point of a covered pixel.
Vec3 pixel_position(const Mesh& mesh, const RasterOutput& raster, std::size_t pixel);

struct ClickProjection {
  int x = -1;
  int y = -1;
  bool visible = false;
};

// Projects a vertex to its nearest pixel. Visible when that pixel is covered
// and the vertex is not behind the stored surface: the covering face's plane,
// evaluated at the vertex's exact projection, may be nearer by at most
// 1e-3 * radius. Vertices behind the camera or outside the frame return
// (-1, -1, false).
ClickProjection project_click(const Mesh& mesh, const Camera& cam, const RasterOutput& raster,
                              std::int32_t vid);

std::vector<std::int32_t> visible_vertices(const Mesh& mesh, const Camera& cam, const RasterOutput& raster);
// Vertices of every face that covers at least one pixel, sorted.
std::vector<std::int32_t> active_vertices(const RasterOutput& raster, std::span<const Face> faces,
                                          std::size_t vertex_count);

struct ViewPolicy {
  double elevation_min = -std::numbers::pi / 3.0;
  double elevation_max = std::numbers::pi / 3.0;
  double radius = 2.5;
  double fov_y = std::numbers::pi / 3.0;
  int width = 224;
  int height = 224;
};

// Deterministic camera stream: azimuth uniform in [0, 2pi), elevation uniform
// within the policy bounds.
class ViewSampler {
 public:
  ViewSampler(ViewPolicy policy, std::uint64_t seed) : policy_(policy), rng_(seed) {}
  Camera next();
  const ViewPolicy& policy() const { return policy_; }

 private:
  ViewPolicy policy_;
  Rng rng_;
};

}  // namespace meshclick
