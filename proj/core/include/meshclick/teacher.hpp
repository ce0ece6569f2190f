#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "meshclick/geometry.hpp"
#include "meshclick/image_io.hpp"
#include "meshclick/rasterizer.hpp"

namespace meshclick {

class TeacherError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PromptPixel {
  int x = 0;
  int y = 0;
  ClickSign sign = ClickSign::positive;
  bool operator==(const PromptPixel&) const = default;
};

// Order-independent encoding of a prompt list, e.g. "3,4,+;10,2,-".
std::string canonical_prompt_key(std::span<const PromptPixel> prompts);

// One rendered view handed to a teacher. view_id keys file-backed data.
struct TeacherView {
  std::int64_t view_id = 0;
  Camera camera;
  RasterOutput raster;
};

TeacherView make_view(const Mesh& mesh, const Camera& cam, std::int64_t view_id = 0);

// 2D supervision oracle: a feature map per view and a mask per prompt set.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual int feature_dim() const = 0;
  virtual AttributeImage<float> embed(const TeacherView& view) const = 0;
  virtual MaskImage segment(const TeacherView& view, std::span<const PromptPixel> prompts) const = 0;
};

struct SyntheticTeacherConfig {
  std::uint64_t seed = 7;
  int feature_dim = 256;
  double angle_threshold = std::numbers::pi / 6.0;  // 30 degrees
  double depth_step_ratio = 0.05;                   // of camera radius, per 4-neighbour step
};

// Procedural teacher. Features: tanh(A [n, depth - radius, p] + b) per
// covered pixel followed by one 3x3 box blur over covered pixels. Masks:
// normal-angle / depth-continuity flood fill from each positive prompt,
// minus the regions grown from negative prompts. Holds a reference to the
// mesh, which must outlive it.
class SyntheticTeacher final : public Teacher {
 public:
  SyntheticTeacher(const Mesh& mesh, SyntheticTeacherConfig config = {});

  int feature_dim() const override { return config_.feature_dim; }
  AttributeImage<float> embed(const TeacherView& view) const override;
  MaskImage segment(const TeacherView& view, std::span<const PromptPixel> prompts) const override;

  // Region grown from a single prompt pixel, before union/subtraction.
  MaskImage grow_region(const TeacherView& view, const PromptPixel& prompt) const;
  const SyntheticTeacherConfig& config() const { return config_; }

 private:
  const Mesh& mesh_;
  SyntheticTeacherConfig config_;
  Matrix<double> projection_;  // feature_dim x 7
  Matrix<double> offset_;      // 1 x feature_dim
};

// Teacher-dataset directory: manifest.json plus mask PGMs and optional MFFI
// feature images.
struct DatasetSample {
  std::int64_t view_id = 0;
  Camera camera;
  std::vector<PromptPixel> prompts;
  std::string mask_file;
  std::string feature_file;   // empty when absent
  std::vector<Click> clicks;  // vertex-level clicks behind the prompts, may be empty
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  int version = kVersion;
  int width = 0;
  int height = 0;
  int feature_dim = 256;
  std::vector<DatasetSample> samples;
};

DatasetManifest read_dataset_manifest(const std::filesystem::path& dir);
void write_dataset_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);

// Serves stored masks and feature maps. segment() looks masks up by
// (view_id, canonical prompt key).
class FileTeacher final : public Teacher {
 public:
  explicit FileTeacher(std::filesystem::path dir);

  int feature_dim() const override { return manifest_.feature_dim; }
  AttributeImage<float> embed(const TeacherView& view) const override;
  MaskImage segment(const TeacherView& view, std::span<const PromptPixel> prompts) const override;

  const DatasetManifest& manifest() const { return manifest_; }
  // One camera per distinct view id carrying a feature file.
  std::vector<std::pair<std::int64_t, Camera>> feature_views() const;

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
  std::map<std::pair<std::int64_t, std::string>, std::string> mask_index_;
  std::map<std::int64_t, std::string> feature_index_;
};

// Structure, dimension and channel checks for a dataset directory. With a
// mesh, prompts must land on covered pixels and masks stay inside coverage;
// with a replay teacher every mask must be regenerated bit-identically.
// Returns one message per problem; empty means valid.
std::vector<std::string> validate_dataset(const std::filesystem::path& dir, const Mesh* mesh = nullptr,
                                          const Teacher* replay = nullptr);

// Render bundle consumed by the offline exporter: color images plus prompt
// sets per view, described by bundle.json.
struct BundleView {
  std::int64_t view_id = 0;
  Camera camera;
  std::string color_file;
  std::vector<std::vector<PromptPixel>> prompt_sets;
  std::vector<std::vector<Click>> click_sets;  // parallel to prompt_sets
};

struct RenderBundle {
  static constexpr int kVersion = 1;
  int version = kVersion;
  int width = 0;
  int height = 0;
  std::vector<BundleView> views;
};

void write_render_bundle_manifest(const std::filesystem::path& dir, const RenderBundle& bundle);
RenderBundle read_render_bundle_manifest(const std::filesystem::path& dir);

}  // namespace meshclick
