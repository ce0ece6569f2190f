#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "meshclick/decoder.hpp"
#include "meshclick/encoder.hpp"
#include "meshclick/geometry.hpp"
#include "meshclick/numerics.hpp"
#include "meshclick/rasterizer.hpp"
#include "meshclick/teacher.hpp"

namespace meshclick {

struct TrainConfig {
  int image_size = 64;
  int views_per_epoch = 200;   // stage-1 training views per epoch
  int encoder_epochs = 50;
  int decoder_epochs = 50;
  int validation_views = 16;   // fixed held-out views scored after each epoch
  double encoder_learning_rate = 1e-4;
  double decoder_learning_rate = 1e-4;
  std::uint64_t seed = 0;
  double train_vertex_fraction = 0.03;
  double second_click_change_threshold = 0.05;
  int max_resample_attempts = 50;
  int views_per_vertex = 8;
  double joint_encoder_weight = 5.0;
  double elevation_limit = 1.0471975511965976;  // pi / 3
  double camera_radius = 2.5;
  double fov_y = 1.0471975511965976;

  // Throws std::invalid_argument on out-of-range fields.
  void validate() const;
  ViewPolicy view_policy() const;
};

// Aborted optimization. The model passed in holds the last-good parameters
// when this is thrown.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

// Line-oriented JSON training log. Writes nothing without a stream.
class TrainingLog {
 public:
  TrainingLog() = default;
  explicit TrainingLog(std::ostream* out) : out_(out) {}
  struct Entry {
    std::string stage;
    int epoch = 0;
    std::int64_t step = 0;
    std::vector<std::pair<std::string, double>> terms;
  };
  void write(const Entry& entry, std::uint64_t seed);
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::ostream* out_ = nullptr;
  std::vector<Entry> entries_;
};

// Random per-stage streams derived from the run seed.
enum class SeedStream : std::uint64_t {
  distill_views = 1,
  validation_views = 2,
  train_vertices = 3,
  click_views = 4,
  second_clicks = 5,
  decoder_order = 6,
  validation_clicks = 7,
  evaluation_views = 8,
  evaluation_clicks = 9,
};
std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

// Held-out cameras from a seed stream, sized per the config.
std::vector<Camera> sample_cameras(const TrainConfig& cfg, SeedStream stream, int count);

struct DistillResult {
  double initial_validation_loss = 0.0;
  double final_validation_loss = 0.0;  // of the kept (best) parameters
  int best_epoch = -1;                 // -1 when no epoch improved on the initial parameters
  std::int64_t steps = 0;
};

// Mean per-view encoder loss of the model's current field over the cameras.
double encoder_validation_loss(const Mesh& mesh, const Model& model, const Teacher& teacher,
                               std::span<const std::pair<std::int64_t, Camera>> views);

// Stage 1. Each step renders one view, asks the teacher for its feature map
// and takes one adaptive-moment step on the encoder parameters. With
// `fixed_views` empty, fresh views are sampled every epoch; otherwise the
// fixed list (e.g. a file-backed teacher's views) is shuffled per epoch and
// every eighth view is held out for validation. The kept parameters are the
// best by validation loss. Leaves model.stage = "encoder" and refreshes the
// cached features.
DistillResult distill_encoder(const Mesh& mesh, const Teacher& teacher, Model& model, const TrainConfig& cfg,
                              TrainingLog& log, std::vector<std::pair<std::int64_t, Camera>> fixed_views = {});

// One simulated-click sample group: the clicks behind a prompt set, and the
// dataset samples (views) that carry it.
struct ClickRecord {
  std::int32_t first_click = 0;
  std::optional<Click> second_click;
  std::vector<std::size_t> samples;  // indices into ClickDataset::manifest.samples
};

struct ClickDataset {
  DatasetManifest manifest;
  std::vector<MaskImage> masks;  // parallel to manifest.samples
  std::vector<ClickRecord> records;
  std::vector<std::int32_t> train_vertices;
  std::vector<std::int32_t> skipped_vertices;  // never visible within the attempt budget
  std::size_t rejected_second_clicks = 0;
};

// Phase 1: k views per sampled training vertex where it is visible, each
// with a single positive prompt. Phase 2: per phase-1 view, a second visible
// vertex and sign whose mask changes the phase-1 area by at least the
// threshold in the right direction (and keeps the first prompt inside the
// mask); otherwise resampled up to max_resample_attempts times.
ClickDataset generate_click_dataset(const Mesh& mesh, const Teacher& teacher, const TrainConfig& cfg,
                                    std::ostream* warnings = nullptr);

// Writes manifest.json and one mask PGM per sample. With a teacher, one MFFI
// feature map per distinct view is also written.
void write_click_dataset(const std::filesystem::path& dir, const ClickDataset& dataset, const Mesh& mesh,
                         const Teacher* feature_teacher = nullptr);
// Reads a directory written by write_click_dataset (or an exporter that
// records vertex clicks). Samples without clicks are unusable for decoder
// training and are rejected.
ClickDataset read_click_dataset(const std::filesystem::path& dir);

struct DecoderTrainResult {
  double final_train_loss = 0.0;
  double best_validation_iou = 0.0;
  int best_epoch = -1;
  std::int64_t steps = 0;
};

// Loss and gradient of one decoder sample, exposed for gradient checks:
// binary cross-entropy between the rendered two-channel probability image
// (segment, background) and the mask over covered pixels. Returns d loss /
// d F through the click and query paths and accumulates decoder gradients.
template <class T>
struct DecoderSampleLoss {
  double loss = 0.0;
  Matrix<T> grad_features;
  std::size_t covered_pixels = 0;
};
template <class T>
DecoderSampleLoss<T> decoder_sample_loss(const Mesh& mesh, const RasterOutput& raster, const Matrix<T>& features,
                                         const ClickSet& clicks, const MaskImage& mask, ParamStore<T>& params,
                                         const DecoderConfig& config);

// Stage 2 on a frozen encoder: one step per dataset sample, decoder
// parameters only. Validation IoU on held-out views and vertices picks the
// kept parameters. Throws std::logic_error if the encoder parameters change.
// Leaves model.stage = "two-stage".
DecoderTrainResult train_decoder(const Mesh& mesh, Model& model, const ClickDataset& dataset, const Teacher& teacher,
                                 const TrainConfig& cfg, TrainingLog& log);

// Ablation: encoder and decoder optimized together on
// w * L_enc + L_dec over the same samples and epoch budget as stage 2. Needs
// teacher feature maps for every sample view. Leaves model.stage = "joint".
DecoderTrainResult train_joint_ablation(const Mesh& mesh, Model& model, const ClickDataset& dataset,
                                        const Teacher& teacher, const TrainConfig& cfg, TrainingLog& log);

}  // namespace meshclick
