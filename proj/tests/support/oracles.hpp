#pragma once

// Independent reference implementations used only by tests. None of these
// call into the library code they check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "meshclick/geometry.hpp"
#include "meshclick/numerics.hpp"
#include "meshclick/rasterizer.hpp"

namespace oracle {

using meshclick::Matrix;
using meshclick::Vec3;

// Central differences of a scalar function with respect to every entry of x.
inline Matrix<double> numeric_gradient(Matrix<double>& x, const std::function<double()>& f, double h = 1e-6) {
  Matrix<double> g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f();
    x.data()[i] = saved - h;
    const double down = f();
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Max |a - b| / max(1, |b|) over entries.
inline double relative_error(const Matrix<double>& a, const Matrix<double>& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / std::max(1.0, std::abs(b.data()[i])));
  }
  return worst;
}

inline Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  meshclick::Rng rng(seed);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Weighted inner product used to reduce a matrix output to a scalar.
inline double dot(const Matrix<double>& a, const Matrix<double>& b) { return (a.array() * b.array()).sum(); }

struct Hit {
  double t;
  int face;
  double u;
  double v;
};

// Moller-Trumbore, two-sided.
inline std::optional<std::pair<double, Eigen::Vector2d>> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a,
                                                                     const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = o - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= 0.0) return std::nullopt;
  return std::make_pair(t, Eigen::Vector2d(u, v));
}

// Brute-force ray cast through a pixel center: nearest hit over every face.
inline std::optional<Hit> cast_pixel(const meshclick::Mesh& mesh, const meshclick::Camera& cam, int x, int y) {
  const double f = 0.5 * cam.height / std::tan(0.5 * cam.fov_y);
  const Vec3 eye(cam.radius * std::cos(cam.elevation) * std::sin(cam.azimuth), cam.radius * std::sin(cam.elevation),
                 cam.radius * std::cos(cam.elevation) * std::cos(cam.azimuth));
  const Vec3 fwd = (-eye).normalized();
  const Vec3 right = fwd.cross(Vec3(0, 1, 0)).normalized();
  const Vec3 up = right.cross(fwd);
  const double sx = (x + 0.5 - 0.5 * cam.width) / f;
  const double sy = (0.5 * cam.height - (y + 0.5)) / f;
  const Vec3 dir = (fwd + sx * right + sy * up).normalized();
  std::optional<Hit> best;
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& fc = mesh.faces[i];
    auto hit = ray_triangle(eye, dir, mesh.vertices[fc[0]], mesh.vertices[fc[1]], mesh.vertices[fc[2]]);
    if (hit && (!best || hit->first < best->t)) best = Hit{hit->first, static_cast<int>(i), hit->second.x(), hit->second.y()};
  }
  return best;
}

// Exhaustive between-class variance maximization over every threshold in a
// fine candidate grid; returns the best between-class variance reachable.
struct SplitScore {
  double variance = 0.0;
  double threshold = 0.0;
};

// Exhaustive search over the thresholds t = (k + 1) / bins: class 0 is v < t.
inline SplitScore best_between_class_variance(const std::vector<double>& values, int bins) {
  SplitScore best{-1.0, 0.0};
  const double n = static_cast<double>(values.size());
  for (int k = 0; k + 1 < bins; ++k) {
    const double t = static_cast<double>(k + 1) / bins;
    double n0 = 0, s0 = 0, n1 = 0, s1 = 0;
    for (double v : values) {
      if (v < t) { n0 += 1; s0 += v; } else { n1 += 1; s1 += v; }
    }
    if (n0 == 0 || n1 == 0) continue;
    const double m0 = s0 / n0, m1 = s1 / n1;
    const double score = (n0 / n) * (n1 / n) * (m0 - m1) * (m0 - m1);
    if (score > best.variance * (1.0 + 1e-12)) best = {score, t};
  }
  return best;
}

}  // namespace oracle
