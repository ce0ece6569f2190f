#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace meshclick {

using Vec3 = Eigen::Vector3d;
using Face = std::array<std::int32_t, 3>;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ObjParseError : public GeometryError {
 public:
  ObjParseError(std::size_t line, const std::string& what)
      : GeometryError("OBJ line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Triangle mesh used as the segmentation substrate. Immutable after
// construction through make_mesh()/load_obj(); all fields are derived
// consistently there.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> vertex_normals;
  std::vector<std::vector<std::int32_t>> one_ring;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
};

struct MeshOptions {
  bool normalize = true;
};

// Drops degenerate faces, optionally normalizes into the unit sphere, then
// computes area-weighted vertex normals and one-ring adjacency. Vertices are
// never welded or reordered.
Mesh make_mesh(std::vector<Vec3> vertices, std::vector<Face> faces, MeshOptions options = {});

// Translates the vertex centroid to the origin and scales so the largest
// vertex norm is 1.
void normalize_vertices(std::vector<Vec3>& vertices);

Mesh parse_obj(std::istream& in, MeshOptions options = {});
Mesh load_obj(const std::filesystem::path& path, MeshOptions options = {});
void save_obj(const Mesh& mesh, const std::filesystem::path& path);

const std::vector<std::int32_t>& one_ring_neighbors(const Mesh& mesh, std::int32_t vid);

// Uniform sample without replacement of max(1, round(fraction * n)) vertex
// ids, returned sorted.
std::vector<std::int32_t> sample_training_vertices(const Mesh& mesh, double fraction,
                                                   std::uint64_t seed);

// FNV-1a over vertex coordinates and face indices.
std::uint64_t mesh_hash(const Mesh& mesh);

// Procedural meshes used by tests, benchmarks and the CLI's builtin: meshes.
Mesh make_icosphere(int subdivisions);
Mesh make_grid(int cells_x, int cells_y);
// Axis-aligned cube whose six sides do not share vertices (flat normals).
Mesh make_cube(int cells_per_side = 1);
// Non-convex table: slab top on four legs, every box side an independent
// subdivided grid. target_vertices steers the subdivision density.
Mesh make_table(int target_vertices = 2000);
// Resolves "builtin:icosphere<s>", "builtin:table[<n>]", "builtin:cube" or an
// OBJ path.
Mesh load_mesh_spec(std::string_view spec);

enum class ClickSign : std::uint8_t { positive, negative };

struct Click {
  std::int32_t vertex;
  ClickSign sign;
  bool operator==(const Click&) const = default;
};

class ClickError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Set of signed vertex prompts. Entries are kept in canonical order
// (positives first, each group sorted by vertex id) so that the listing order
// supplied by a caller never affects downstream computation.
class ClickSet {
 public:
  ClickSet() = default;

  // Validates against a mesh with vertex_count vertices: distinct ids in
  // range and at least one positive.
  static ClickSet create(std::vector<Click> clicks, std::size_t vertex_count);

  // Parses "12:+,40:-" (also accepts "pos"/"neg" as the sign).
  static ClickSet parse(std::string_view text, std::size_t vertex_count);

  std::span<const Click> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t positive_count() const { return positive_count_; }
  std::size_t negative_count() const { return entries_.size() - positive_count_; }
  std::vector<std::int32_t> positives() const;
  std::vector<std::int32_t> negatives() const;
  std::string to_string() const;

 private:
  std::vector<Click> entries_;
  std::size_t positive_count_ = 0;
};

// ASCII PLY with per-vertex RGB: selected vertices blue, others light gray.
void write_selection_ply(const Mesh& mesh, std::span<const bool> selected,
                         const std::filesystem::path& path);

}  // namespace meshclick
