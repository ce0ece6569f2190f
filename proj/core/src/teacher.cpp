#include "meshclick/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace meshclick {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw FormatError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw FormatError(where + ": unknown field '" + key + "'");
    }
  }
}

json camera_to_json(const Camera& c) {
  return {{"azimuth", c.azimuth}, {"elevation", c.elevation}, {"radius", c.radius},
          {"fov_y", c.fov_y},     {"width", c.width},         {"height", c.height}};
}

Camera camera_from_json(const json& j, const std::string& where) {
  reject_unknown_keys(j, {"azimuth", "elevation", "radius", "fov_y", "width", "height"}, where);
  Camera c;
  c.azimuth = j.at("azimuth").get<double>();
  c.elevation = j.at("elevation").get<double>();
  c.radius = j.at("radius").get<double>();
  c.fov_y = j.at("fov_y").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  return c;
}

const char* sign_name(ClickSign s) { return s == ClickSign::positive ? "positive" : "negative"; }

ClickSign sign_from_json(const json& j, const std::string& where) {
  const auto s = j.get<std::string>();
  if (s == "positive" || s == "+") return ClickSign::positive;
  if (s == "negative" || s == "-") return ClickSign::negative;
  throw FormatError(where + ": bad sign '" + s + "'");
}

json prompts_to_json(std::span<const PromptPixel> prompts) {
  json arr = json::array();
  for (const auto& p : prompts) arr.push_back({{"x", p.x}, {"y", p.y}, {"sign", sign_name(p.sign)}});
  return arr;
}

std::vector<PromptPixel> prompts_from_json(const json& arr, const std::string& where) {
  std::vector<PromptPixel> out;
  for (const auto& p : arr) {
    reject_unknown_keys(p, {"x", "y", "sign"}, where + " prompt");
    out.push_back({p.at("x").get<int>(), p.at("y").get<int>(), sign_from_json(p.at("sign"), where)});
  }
  return out;
}

json clicks_to_json(std::span<const Click> clicks) {
  json arr = json::array();
  for (const auto& c : clicks) arr.push_back({{"vertex", c.vertex}, {"sign", sign_name(c.sign)}});
  return arr;
}

std::vector<Click> clicks_from_json(const json& arr, const std::string& where) {
  std::vector<Click> out;
  for (const auto& c : arr) {
    reject_unknown_keys(c, {"vertex", "sign"}, where + " click");
    out.push_back({c.at("vertex").get<std::int32_t>(), sign_from_json(c.at("sign"), where)});
  }
  return out;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

std::string canonical_prompt_key(std::span<const PromptPixel> prompts) {
  std::vector<PromptPixel> sorted(prompts.begin(), prompts.end());
  std::sort(sorted.begin(), sorted.end(), [](const PromptPixel& a, const PromptPixel& b) {
    return std::tie(a.y, a.x, a.sign) < std::tie(b.y, b.x, b.sign);
  });
  std::string key;
  for (const auto& p : sorted) {
    if (!key.empty()) key += ';';
    key += std::to_string(p.x) + "," + std::to_string(p.y) + (p.sign == ClickSign::positive ? ",+" : ",-");
  }
  return key;
}

TeacherView make_view(const Mesh& mesh, const Camera& cam, std::int64_t view_id) {
  return {view_id, cam, rasterize(mesh, cam)};
}

SyntheticTeacher::SyntheticTeacher(const Mesh& mesh, SyntheticTeacherConfig config)
    : mesh_(mesh), config_(config) {
  if (config_.feature_dim < 1) throw std::invalid_argument("teacher feature_dim must be positive");
  Rng rng(config_.seed);
  projection_.resize(config_.feature_dim, 7);
  for (Eigen::Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = 0.8 * rng.normal();
  offset_.resize(1, config_.feature_dim);
  for (Eigen::Index i = 0; i < offset_.size(); ++i) offset_.data()[i] = rng.uniform(-0.5, 0.5);
}

AttributeImage<float> SyntheticTeacher::embed(const TeacherView& view) const {
  const RasterOutput& r = view.raster;
  const auto d = static_cast<Eigen::Index>(config_.feature_dim);
  Matrix<double> raw = Matrix<double>::Zero(static_cast<Eigen::Index>(r.pixel_count()), d);
  Eigen::Matrix<double, 7, 1> x;
  for (std::size_t pix = 0; pix < r.pixel_count(); ++pix) {
    if (!r.covered(pix)) continue;
    x.head<3>() = pixel_normal(mesh_, r, pix);
    x(3) = r.depth[pix] - view.camera.radius;
    x.tail<3>() = pixel_position(mesh_, r, pix);
    raw.row(static_cast<Eigen::Index>(pix)) = ((projection_ * x).transpose() + offset_).array().tanh();
  }
  AttributeImage<float> out;
  out.width = r.width;
  out.height = r.height;
  out.values = Matrix<float>::Zero(raw.rows(), d);
  for (int y = 0; y < r.height; ++y) {
    for (int xx = 0; xx < r.width; ++xx) {
      const std::size_t pix = static_cast<std::size_t>(y) * r.width + xx;
      if (!r.covered(pix)) continue;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      int count = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = xx + dx;
          const int ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= r.width || ny >= r.height) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * r.width + nx;
          if (!r.covered(q)) continue;
          acc += raw.row(static_cast<Eigen::Index>(q));
          ++count;
        }
      }
      out.values.row(static_cast<Eigen::Index>(pix)) = (acc / count).cast<float>();
    }
  }
  return out;
}

MaskImage SyntheticTeacher::grow_region(const TeacherView& view, const PromptPixel& prompt) const {
  const RasterOutput& r = view.raster;
  if (prompt.x < 0 || prompt.y < 0 || prompt.x >= r.width || prompt.y >= r.height) {
    throw TeacherError("prompt (" + std::to_string(prompt.x) + "," + std::to_string(prompt.y) + ") outside image");
  }
  const std::size_t seed_pix = static_cast<std::size_t>(prompt.y) * r.width + prompt.x;
  if (!r.covered(seed_pix)) {
    throw TeacherError("prompt (" + std::to_string(prompt.x) + "," + std::to_string(prompt.y) + ") off coverage");
  }
  const Vec3 seed_normal = pixel_normal(mesh_, r, seed_pix);
  const double cos_limit = std::cos(config_.angle_threshold);
  const double depth_limit = config_.depth_step_ratio * view.camera.radius;
  MaskImage region(r.width, r.height);
  std::deque<std::size_t> queue{seed_pix};
  region.data[seed_pix] = 1;
  while (!queue.empty()) {
    const std::size_t pix = queue.front();
    queue.pop_front();
    const int px = static_cast<int>(pix % r.width);
    const int py = static_cast<int>(pix / r.width);
    constexpr int kSteps[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& step : kSteps) {
      const int nx = px + step[0];
      const int ny = py + step[1];
      if (nx < 0 || ny < 0 || nx >= r.width || ny >= r.height) continue;
      const std::size_t q = static_cast<std::size_t>(ny) * r.width + nx;
      if (region.data[q] || !r.covered(q)) continue;
      if (std::abs(r.depth[q] - r.depth[pix]) >= depth_limit) continue;
      if (pixel_normal(mesh_, r, q).dot(seed_normal) <= cos_limit) continue;
      region.data[q] = 1;
      queue.push_back(q);
    }
  }
  return region;
}

MaskImage SyntheticTeacher::segment(const TeacherView& view, std::span<const PromptPixel> prompts) const {
  if (std::none_of(prompts.begin(), prompts.end(), [](const auto& p) { return p.sign == ClickSign::positive; })) {
    throw TeacherError("teacher segmentation needs at least one positive prompt");
  }
  MaskImage mask(view.raster.width, view.raster.height);
  for (const auto& p : prompts) {
    if (p.sign != ClickSign::positive) continue;
    const MaskImage region = grow_region(view, p);
    for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] |= region.data[i];
  }
  for (const auto& p : prompts) {
    if (p.sign != ClickSign::negative) continue;
    const MaskImage region = grow_region(view, p);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
      if (region.data[i]) mask.data[i] = 0;
    }
  }
  return mask;
}

DatasetManifest read_dataset_manifest(const std::filesystem::path& dir) {
  const json j = read_json_file(dir / "manifest.json");
  reject_unknown_keys(j, {"version", "image_size", "d", "samples"}, "manifest");
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != DatasetManifest::kVersion) {
      throw FormatError("manifest version " + std::to_string(m.version) + " is not supported");
    }
    const auto& size = j.at("image_size");
    if (!size.is_array() || size.size() != 2) throw FormatError("manifest: image_size must be [width, height]");
    m.width = size[0].get<int>();
    m.height = size[1].get<int>();
    m.feature_dim = j.at("d").get<int>();
    for (const auto& s : j.at("samples")) {
      reject_unknown_keys(s, {"view_id", "camera", "prompts", "mask_file", "feature_file", "clicks"},
                          "manifest sample");
      DatasetSample sample;
      sample.view_id = s.at("view_id").get<std::int64_t>();
      sample.camera = camera_from_json(s.at("camera"), "manifest camera");
      sample.prompts = prompts_from_json(s.at("prompts"), "manifest sample");
      sample.mask_file = s.at("mask_file").get<std::string>();
      if (s.contains("feature_file") && !s.at("feature_file").is_null()) {
        sample.feature_file = s.at("feature_file").get<std::string>();
      }
      if (s.contains("clicks")) sample.clicks = clicks_from_json(s.at("clicks"), "manifest sample");
      m.samples.push_back(std::move(sample));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

void write_dataset_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest) {
  json samples = json::array();
  for (const auto& s : manifest.samples) {
    json js = {{"view_id", s.view_id},
               {"camera", camera_to_json(s.camera)},
               {"prompts", prompts_to_json(s.prompts)},
               {"mask_file", s.mask_file}};
    if (!s.feature_file.empty()) js["feature_file"] = s.feature_file;
    if (!s.clicks.empty()) js["clicks"] = clicks_to_json(s.clicks);
    samples.push_back(std::move(js));
  }
  const json j = {{"version", manifest.version},
                  {"image_size", {manifest.width, manifest.height}},
                  {"d", manifest.feature_dim},
                  {"samples", std::move(samples)}};
  std::filesystem::create_directories(dir);
  write_json_file(dir / "manifest.json", j);
}

FileTeacher::FileTeacher(std::filesystem::path dir) : dir_(std::move(dir)), manifest_(read_dataset_manifest(dir_)) {
  for (const auto& s : manifest_.samples) {
    mask_index_[{s.view_id, canonical_prompt_key(s.prompts)}] = s.mask_file;
    if (!s.feature_file.empty()) feature_index_.emplace(s.view_id, s.feature_file);
  }
}

AttributeImage<float> FileTeacher::embed(const TeacherView& view) const {
  auto it = feature_index_.find(view.view_id);
  if (it == feature_index_.end()) throw TeacherError("no feature image for view " + std::to_string(view.view_id));
  return read_mffi(dir_ / it->second);
}

MaskImage FileTeacher::segment(const TeacherView& view, std::span<const PromptPixel> prompts) const {
  auto it = mask_index_.find({view.view_id, canonical_prompt_key(prompts)});
  if (it == mask_index_.end()) {
    throw TeacherError("no stored mask for view " + std::to_string(view.view_id) + " prompts '" +
                       canonical_prompt_key(prompts) + "'");
  }
  return read_mask_pgm(dir_ / it->second);
}

std::vector<std::pair<std::int64_t, Camera>> FileTeacher::feature_views() const {
  std::vector<std::pair<std::int64_t, Camera>> out;
  std::set<std::int64_t> seen;
  for (const auto& s : manifest_.samples) {
    if (!s.feature_file.empty() && seen.insert(s.view_id).second) out.emplace_back(s.view_id, s.camera);
  }
  return out;
}

std::vector<std::string> validate_dataset(const std::filesystem::path& dir, const Mesh* mesh,
                                          const Teacher* replay) {
  std::vector<std::string> errors;
  DatasetManifest m;
  try {
    m = read_dataset_manifest(dir);
  } catch (const std::exception& e) {
    errors.push_back(e.what());
    return errors;
  }
  if (m.width <= 0 || m.height <= 0) errors.push_back("manifest: non-positive image size");
  if (m.feature_dim <= 0) errors.push_back("manifest: non-positive d");
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const auto& s = m.samples[i];
    const std::string where = "sample " + std::to_string(i) + " (view " + std::to_string(s.view_id) + "): ";
    if (s.camera.width != m.width || s.camera.height != m.height) {
      errors.push_back(where + "camera size differs from image_size");
    }
    try {
      s.camera.validate();
    } catch (const std::exception& e) {
      errors.push_back(where + e.what());
      continue;
    }
    MaskImage mask;
    try {
      mask = read_mask_pgm(dir / s.mask_file);
    } catch (const std::exception& e) {
      errors.push_back(where + e.what());
      continue;
    }
    if (mask.width != m.width || mask.height != m.height) errors.push_back(where + "mask size differs from image_size");
    bool positive_inside = false;
    for (const auto& p : s.prompts) {
      if (p.x < 0 || p.y < 0 || p.x >= mask.width || p.y >= mask.height) {
        errors.push_back(where + "prompt outside image");
        continue;
      }
      if (p.sign == ClickSign::positive && mask.data[static_cast<std::size_t>(p.y) * mask.width + p.x]) {
        positive_inside = true;
      }
    }
    if (!positive_inside) errors.push_back(where + "no positive prompt inside the mask");
    if (!s.feature_file.empty()) {
      try {
        const auto feat = read_mffi(dir / s.feature_file);
        if (feat.width != m.width || feat.height != m.height) errors.push_back(where + "feature size mismatch");
        if (feat.channels() != m.feature_dim) errors.push_back(where + "feature channel count differs from d");
      } catch (const std::exception& e) {
        errors.push_back(where + e.what());
      }
    }
    if (mesh == nullptr) continue;
    for (const auto& c : s.clicks) {
      if (c.vertex < 0 || static_cast<std::size_t>(c.vertex) >= mesh->vertex_count()) {
        errors.push_back(where + "click vertex out of range");
      }
    }
    const TeacherView view = make_view(*mesh, s.camera, s.view_id);
    for (const auto& p : s.prompts) {
      if (p.x < 0 || p.y < 0 || p.x >= view.raster.width || p.y >= view.raster.height) continue;
      if (!view.raster.covered(static_cast<std::size_t>(p.y) * view.raster.width + p.x)) {
        errors.push_back(where + "prompt on background pixel");
      }
    }
    if (mask.data.size() == view.raster.pixel_count()) {
      for (std::size_t pix = 0; pix < mask.data.size(); ++pix) {
        if (mask.data[pix] && !view.raster.covered(pix)) {
          errors.push_back(where + "mask covers background");
          break;
        }
      }
    }
    if (replay != nullptr) {
      try {
        if (replay->segment(view, s.prompts) != mask) errors.push_back(where + "replayed mask differs");
      } catch (const std::exception& e) {
        errors.push_back(where + "replay failed: " + e.what());
      }
    }
  }
  return errors;
}

void write_render_bundle_manifest(const std::filesystem::path& dir, const RenderBundle& bundle) {
  json views = json::array();
  for (const auto& v : bundle.views) {
    json sets = json::array();
    for (std::size_t i = 0; i < v.prompt_sets.size(); ++i) {
      json entry = {{"prompts", prompts_to_json(v.prompt_sets[i])}};
      if (i < v.click_sets.size()) entry["clicks"] = clicks_to_json(v.click_sets[i]);
      sets.push_back(std::move(entry));
    }
    views.push_back({{"view_id", v.view_id},
                     {"camera", camera_to_json(v.camera)},
                     {"color_file", v.color_file},
                     {"prompt_sets", std::move(sets)}});
  }
  const json j = {{"version", bundle.version},
                  {"image_size", {bundle.width, bundle.height}},
                  {"views", std::move(views)}};
  std::filesystem::create_directories(dir);
  write_json_file(dir / "bundle.json", j);
}

RenderBundle read_render_bundle_manifest(const std::filesystem::path& dir) {
  const json j = read_json_file(dir / "bundle.json");
  reject_unknown_keys(j, {"version", "image_size", "views"}, "bundle");
  RenderBundle b;
  try {
    b.version = j.at("version").get<int>();
    if (b.version != RenderBundle::kVersion) throw FormatError("bundle version not supported");
    b.width = j.at("image_size")[0].get<int>();
    b.height = j.at("image_size")[1].get<int>();
    for (const auto& v : j.at("views")) {
      reject_unknown_keys(v, {"view_id", "camera", "color_file", "prompt_sets"}, "bundle view");
      BundleView view;
      view.view_id = v.at("view_id").get<std::int64_t>();
      view.camera = camera_from_json(v.at("camera"), "bundle camera");
      view.color_file = v.at("color_file").get<std::string>();
      for (const auto& set : v.at("prompt_sets")) {
        reject_unknown_keys(set, {"prompts", "clicks"}, "bundle prompt set");
        view.prompt_sets.push_back(prompts_from_json(set.at("prompts"), "bundle"));
        view.click_sets.push_back(set.contains("clicks") ? clicks_from_json(set.at("clicks"), "bundle")
                                                         : std::vector<Click>{});
      }
      b.views.push_back(std::move(view));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bundle: ") + e.what());
  }
  return b;
}

}  // namespace meshclick
