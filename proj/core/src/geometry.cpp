#include "meshclick/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "meshclick/random.hpp"

namespace meshclick {

namespace {

bool is_degenerate(const std::vector<Vec3>& v, const Face& f) {
  if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) return true;
  const Vec3 e1 = v[f[1]] - v[f[0]];
  const Vec3 e2 = v[f[2]] - v[f[0]];
  const double scale = std::max({e1.squaredNorm(), e2.squaredNorm(), (v[f[2]] - v[f[1]]).squaredNorm()});
  return scale == 0.0 || e1.cross(e2).norm() <= 1e-14 * scale;
}

void compute_normals(Mesh& mesh) {
  mesh.vertex_normals.assign(mesh.vertices.size(), Vec3::Zero());
  for (const Face& f : mesh.faces) {
    // Unnormalized cross product = 2 * area * unit normal.
    const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
    for (auto vid : f) mesh.vertex_normals[vid] += n;
  }
  for (Vec3& n : mesh.vertex_normals) {
    const double len = n.norm();
    n = len > 0.0 ? Vec3(n / len) : Vec3(0.0, 0.0, 1.0);
  }
}

void compute_one_ring(Mesh& mesh) {
  mesh.one_ring.assign(mesh.vertices.size(), {});
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const auto a = f[k];
      const auto b = f[(k + 1) % 3];
      mesh.one_ring[a].push_back(b);
      mesh.one_ring[b].push_back(a);
    }
  }
  for (auto& ring : mesh.one_ring) {
    std::sort(ring.begin(), ring.end());
    ring.erase(std::unique(ring.begin(), ring.end()), ring.end());
  }
}

std::int32_t resolve_obj_index(long long raw, std::size_t vertex_count, std::size_t line) {
  long long idx = raw > 0 ? raw - 1 : static_cast<long long>(vertex_count) + raw;
  if (raw == 0 || idx < 0 || idx >= static_cast<long long>(vertex_count)) {
    throw ObjParseError(line, "face index " + std::to_string(raw) + " out of range");
  }
  return static_cast<std::int32_t>(idx);
}

}  // namespace

void normalize_vertices(std::vector<Vec3>& vertices) {
  if (vertices.empty()) return;
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& v : vertices) centroid += v;
  centroid /= static_cast<double>(vertices.size());
  double max_norm = 0.0;
  for (Vec3& v : vertices) {
    v -= centroid;
    max_norm = std::max(max_norm, v.norm());
  }
  if (max_norm > 0.0) {
    for (Vec3& v : vertices) v /= max_norm;
  }
}

Mesh make_mesh(std::vector<Vec3> vertices, std::vector<Face> faces, MeshOptions options) {
  for (const Face& f : faces) {
    for (auto idx : f) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= vertices.size()) {
        throw GeometryError("face index " + std::to_string(idx) + " out of range");
      }
    }
  }
  for (const Vec3& v : vertices) {
    if (!v.allFinite()) throw GeometryError("non-finite vertex coordinate");
  }
  Mesh mesh;
  mesh.vertices = std::move(vertices);
  std::erase_if(faces, [&](const Face& f) { return is_degenerate(mesh.vertices, f); });
  mesh.faces = std::move(faces);
  if (mesh.vertices.empty() || mesh.faces.empty()) throw GeometryError("empty mesh");
  if (options.normalize) normalize_vertices(mesh.vertices);
  compute_normals(mesh);
  compute_one_ring(mesh);
  return mesh;
}

Mesh parse_obj(std::istream& in, MeshOptions options) {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::int32_t> polygon;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z())) throw ObjParseError(line_no, "malformed vertex record");
      vertices.push_back(v);
    } else if (tag == "f") {
      polygon.clear();
      std::string token;
      while (ss >> token) {
        const auto slash = token.find('/');
        const std::string_view head = std::string_view(token).substr(0, slash);
        long long raw = 0;
        const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), raw);
        if (ec != std::errc() || ptr != head.data() + head.size()) {
          throw ObjParseError(line_no, "malformed face index '" + token + "'");
        }
        polygon.push_back(resolve_obj_index(raw, vertices.size(), line_no));
      }
      if (polygon.size() < 3) throw ObjParseError(line_no, "face with fewer than 3 vertices");
      for (std::size_t k = 1; k + 1 < polygon.size(); ++k) {
        faces.push_back({polygon[0], polygon[k], polygon[k + 1]});
      }
    }
    // vt, vn, g, o, s, usemtl, mtllib: ignored.
  }
  if (vertices.empty() || faces.empty()) throw GeometryError("empty mesh: no vertices or faces");
  return make_mesh(std::move(vertices), std::move(faces), options);
}

Mesh load_obj(const std::filesystem::path& path, MeshOptions options) {
  std::ifstream in(path);
  if (!in) throw GeometryError("cannot open " + path.string());
  return parse_obj(in, options);
}

void save_obj(const Mesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw GeometryError("cannot write " + path.string());
  out << std::setprecision(17);
  for (const Vec3& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const Face& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

const std::vector<std::int32_t>& one_ring_neighbors(const Mesh& mesh, std::int32_t vid) {
  if (vid < 0 || static_cast<std::size_t>(vid) >= mesh.vertex_count()) {
    throw std::out_of_range("vertex id " + std::to_string(vid) + " out of range");
  }
  return mesh.one_ring[vid];
}

std::vector<std::int32_t> sample_training_vertices(const Mesh& mesh, double fraction,
                                                   std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must be in (0, 1]");
  const std::size_t n = mesh.vertex_count();
  const auto count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::int32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots become the sample.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::uint64_t mesh_hash(const Mesh& mesh) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t counts[2] = {mesh.vertex_count(), mesh.face_count()};
  mix(counts, sizeof(counts));
  for (const Vec3& v : mesh.vertices) {
    // Quantize so tiny float noise from a text round trip does not change ids.
    const std::int64_t q[3] = {std::llround(v.x() * 1e6), std::llround(v.y() * 1e6),
                               std::llround(v.z() * 1e6)};
    mix(q, sizeof(q));
  }
  for (const Face& f : mesh.faces) mix(f.data(), sizeof(Face));
  return h;
}

Mesh make_icosphere(int subdivisions) {
  if (subdivisions < 0) throw std::invalid_argument("subdivisions must be >= 0");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (Vec3& p : v) p.normalize();
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                         {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                         {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                         {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const Face& tri : f) {
      const int ab = mid(tri[0], tri[1]);
      const int bc = mid(tri[1], tri[2]);
      const int ca = mid(tri[2], tri[0]);
      next.push_back({tri[0], ab, ca});
      next.push_back({tri[1], bc, ab});
      next.push_back({tri[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    f = std::move(next);
  }
  return make_mesh(std::move(v), std::move(f));
}

Mesh make_grid(int cells_x, int cells_y) {
  if (cells_x < 1 || cells_y < 1) throw std::invalid_argument("grid needs at least one cell");
  std::vector<Vec3> v;
  std::vector<Face> f;
  auto id = [cells_x](int i, int j) { return j * (cells_x + 1) + i; };
  for (int j = 0; j <= cells_y; ++j)
    for (int i = 0; i <= cells_x; ++i) v.emplace_back(i, j, 0.0);
  for (int j = 0; j < cells_y; ++j) {
    for (int i = 0; i < cells_x; ++i) {
      f.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      f.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return make_mesh(std::move(v), std::move(f));
}

namespace {

struct Box {
  Vec3 lo;
  Vec3 hi;
  bool omit_top = false;
};

int cells_for(double length, double spacing) {
  return std::max(1, static_cast<int>(std::lround(length / spacing)));
}

// Appends the six sides of a box as independent grids with outward normals.
void append_box(const Box& box, double spacing, std::vector<Vec3>& v, std::vector<Face>& f) {
  for (int axis = 0; axis < 3; ++axis) {
    for (int side = 0; side < 2; ++side) {
      if (box.omit_top && axis == 1 && side == 1) continue;
      const int u_axis = (axis + 1) % 3;
      const int w_axis = (axis + 2) % 3;
      const int nu = cells_for(box.hi[u_axis] - box.lo[u_axis], spacing);
      const int nw = cells_for(box.hi[w_axis] - box.lo[w_axis], spacing);
      const auto base = static_cast<std::int32_t>(v.size());
      for (int j = 0; j <= nw; ++j) {
        for (int i = 0; i <= nu; ++i) {
          Vec3 p;
          p[axis] = side ? box.hi[axis] : box.lo[axis];
          p[u_axis] = box.lo[u_axis] + (box.hi[u_axis] - box.lo[u_axis]) * i / nu;
          p[w_axis] = box.lo[w_axis] + (box.hi[w_axis] - box.lo[w_axis]) * j / nw;
          v.push_back(p);
        }
      }
      auto id = [&](int i, int j) { return base + j * (nu + 1) + i; };
      // e_u x e_w = +e_axis; flip winding on the low side.
      for (int j = 0; j < nw; ++j) {
        for (int i = 0; i < nu; ++i) {
          Face a{id(i, j), id(i + 1, j), id(i + 1, j + 1)};
          Face b{id(i, j), id(i + 1, j + 1), id(i, j + 1)};
          if (!side) {
            std::swap(a[1], a[2]);
            std::swap(b[1], b[2]);
          }
          f.push_back(a);
          f.push_back(b);
        }
      }
    }
  }
}

std::size_t box_vertex_count(const std::vector<Box>& boxes, double spacing) {
  std::vector<Vec3> v;
  std::vector<Face> f;
  for (const Box& b : boxes) append_box(b, spacing, v, f);
  return v.size();
}

Mesh mesh_from_boxes(const std::vector<Box>& boxes, int target_vertices) {
  // Bisect on grid spacing so the vertex count lands near the target.
  double lo = 1e-3;
  double hi = 4.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (box_vertex_count(boxes, mid) > static_cast<std::size_t>(target_vertices)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  std::vector<Vec3> v;
  std::vector<Face> f;
  for (const Box& b : boxes) append_box(b, hi, v, f);
  return make_mesh(std::move(v), std::move(f));
}

}  // namespace

Mesh make_cube(int cells_per_side) {
  if (cells_per_side < 1) throw std::invalid_argument("cube needs at least one cell per side");
  std::vector<Vec3> v;
  std::vector<Face> f;
  append_box({Vec3(-1, -1, -1), Vec3(1, 1, 1)}, 2.0 / cells_per_side, v, f);
  return make_mesh(std::move(v), std::move(f));
}

Mesh make_table(int target_vertices) {
  std::vector<Box> boxes;
  boxes.push_back({Vec3(-1.0, 0.25, -0.7), Vec3(1.0, 0.45, 0.7)});
  for (double sx : {-1.0, 1.0}) {
    for (double sz : {-1.0, 1.0}) {
      const double x0 = sx > 0 ? 0.62 : -0.92;
      const double z0 = sz > 0 ? 0.32 : -0.62;
      // Legs reach into the slab; their top side would be hidden, so omit it.
      boxes.push_back({Vec3(x0, -0.65, z0), Vec3(x0 + 0.3, 0.35, z0 + 0.3), true});
    }
  }
  return mesh_from_boxes(boxes, target_vertices);
}

Mesh load_mesh_spec(std::string_view spec) {
  constexpr std::string_view prefix = "builtin:";
  if (!spec.starts_with(prefix)) return load_obj(std::filesystem::path(std::string(spec)));
  const std::string_view name = spec.substr(prefix.size());
  auto parse_suffix = [&](std::string_view stem, int fallback) {
    const std::string_view rest = name.substr(stem.size());
    if (rest.empty()) return fallback;
    int value = 0;
    const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), value);
    if (ec != std::errc() || ptr != rest.data() + rest.size()) {
      throw GeometryError("bad builtin mesh spec '" + std::string(spec) + "'");
    }
    return value;
  };
  if (name.starts_with("icosphere")) return make_icosphere(parse_suffix("icosphere", 3));
  if (name.starts_with("table")) return make_table(parse_suffix("table", 2000));
  if (name.starts_with("cube")) return make_cube(parse_suffix("cube", 4));
  throw GeometryError("unknown builtin mesh '" + std::string(spec) + "'");
}

ClickSet ClickSet::create(std::vector<Click> clicks, std::size_t vertex_count) {
  if (clicks.empty()) throw ClickError("click set is empty");
  std::set<std::int32_t> seen;
  for (const Click& c : clicks) {
    if (c.vertex < 0 || static_cast<std::size_t>(c.vertex) >= vertex_count) {
      throw ClickError("click vertex " + std::to_string(c.vertex) + " out of range");
    }
    if (!seen.insert(c.vertex).second) {
      throw ClickError("vertex " + std::to_string(c.vertex) + " clicked more than once");
    }
  }
  std::sort(clicks.begin(), clicks.end(), [](const Click& a, const Click& b) {
    if (a.sign != b.sign) return a.sign == ClickSign::positive;
    return a.vertex < b.vertex;
  });
  ClickSet set;
  set.positive_count_ = static_cast<std::size_t>(
      std::count_if(clicks.begin(), clicks.end(), [](const Click& c) { return c.sign == ClickSign::positive; }));
  if (set.positive_count_ == 0) throw ClickError("click set needs at least one positive click");
  set.entries_ = std::move(clicks);
  return set;
}

ClickSet ClickSet::parse(std::string_view text, std::size_t vertex_count) {
  std::vector<Click> clicks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    std::string_view item = text.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) {
      const auto colon = item.find(':');
      if (colon == std::string_view::npos) throw ClickError("click '" + std::string(item) + "' lacks ':sign'");
      const std::string_view id_text = item.substr(0, colon);
      const std::string_view sign_text = item.substr(colon + 1);
      std::int32_t vid = 0;
      const auto [ptr, ec] = std::from_chars(id_text.data(), id_text.data() + id_text.size(), vid);
      if (ec != std::errc() || ptr != id_text.data() + id_text.size()) {
        throw ClickError("bad vertex id in click '" + std::string(item) + "'");
      }
      ClickSign sign;
      if (sign_text == "+" || sign_text == "pos" || sign_text == "positive") {
        sign = ClickSign::positive;
      } else if (sign_text == "-" || sign_text == "neg" || sign_text == "negative") {
        sign = ClickSign::negative;
      } else {
        throw ClickError("bad sign in click '" + std::string(item) + "'");
      }
      clicks.push_back({vid, sign});
    }
    pos = comma + 1;
  }
  return create(std::move(clicks), vertex_count);
}

std::vector<std::int32_t> ClickSet::positives() const {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < positive_count_; ++i) out.push_back(entries_[i].vertex);
  return out;
}

std::vector<std::int32_t> ClickSet::negatives() const {
  std::vector<std::int32_t> out;
  for (std::size_t i = positive_count_; i < entries_.size(); ++i) out.push_back(entries_[i].vertex);
  return out;
}

std::string ClickSet::to_string() const {
  std::string out;
  for (const Click& c : entries_) {
    if (!out.empty()) out += ',';
    out += std::to_string(c.vertex);
    out += c.sign == ClickSign::positive ? ":+" : ":-";
  }
  return out;
}

void write_selection_ply(const Mesh& mesh, std::span<const bool> selected,
                         const std::filesystem::path& path) {
  if (selected.size() != mesh.vertex_count()) throw GeometryError("selection length mismatch");
  std::ofstream out(path);
  if (!out) throw GeometryError("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\n"
      << "element vertex " << mesh.vertex_count() << '\n'
      << "property float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << mesh.face_count() << '\n'
      << "property list uchar int vertex_indices\nend_header\n";
  out << std::setprecision(9);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    const Vec3& v = mesh.vertices[i];
    out << v.x() << ' ' << v.y() << ' ' << v.z() << ' ';
    out << (selected[i] ? "0 0 255" : "200 200 200") << '\n';
  }
  for (const Face& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

}  // namespace meshclick
