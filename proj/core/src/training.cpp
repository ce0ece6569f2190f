#include "meshclick/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "meshclick/evaluation.hpp"
#include "meshclick/image_io.hpp"

namespace meshclick {

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  };
  require(image_size >= 8, "image_size must be >= 8");
  require(views_per_epoch >= 1, "views_per_epoch must be >= 1");
  require(encoder_epochs >= 1 && decoder_epochs >= 1, "epoch counts must be >= 1");
  require(validation_views >= 1, "validation_views must be >= 1");
  require(encoder_learning_rate > 0.0 && decoder_learning_rate > 0.0, "learning rates must be positive");
  require(train_vertex_fraction > 0.0 && train_vertex_fraction <= 1.0, "train_vertex_fraction must be in (0, 1]");
  require(second_click_change_threshold > 0.0 && second_click_change_threshold <= 1.0,
          "second_click_change_threshold must be in (0, 1]");
  require(max_resample_attempts >= 1, "max_resample_attempts must be >= 1");
  require(views_per_vertex >= 1, "views_per_vertex must be >= 1");
  require(joint_encoder_weight >= 0.0, "joint_encoder_weight must be >= 0");
  require(elevation_limit >= 0.0 && elevation_limit < 1.5707963267948966, "elevation_limit must be in [0, pi/2)");
  require(camera_radius > 1.0, "camera_radius must exceed 1");
  require(fov_y > 0.0 && fov_y < 3.141592653589793, "fov_y must be in (0, pi)");
}

ViewPolicy TrainConfig::view_policy() const {
  ViewPolicy p;
  p.elevation_min = -elevation_limit;
  p.elevation_max = elevation_limit;
  p.radius = camera_radius;
  p.fov_y = fov_y;
  p.width = image_size;
  p.height = image_size;
  return p;
}

void TrainingLog::write(const Entry& entry, std::uint64_t seed) {
  entries_.push_back(entry);
  if (out_ == nullptr) return;
  nlohmann::ordered_json j;
  j["stage"] = entry.stage;
  j["epoch"] = entry.epoch;
  j["step"] = entry.step;
  j["seed"] = seed;
  for (const auto& [name, value] : entry.terms) j[name] = value;
  *out_ << j.dump() << '\n';
  out_->flush();
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Camera> sample_cameras(const TrainConfig& cfg, SeedStream stream, int count) {
  ViewSampler sampler(cfg.view_policy(), derive_seed(cfg.seed, stream));
  std::vector<Camera> out;
  for (int i = 0; i < count; ++i) out.push_back(sampler.next());
  return out;
}

namespace {

using Snapshot = std::vector<std::pair<std::string, Matrix<float>>>;

Snapshot snapshot(const ParamStore<float>& store, std::string_view prefix) {
  Snapshot s;
  for (const auto& name : store.names(prefix)) s.emplace_back(name, store.value(name));
  return s;
}

void restore(ParamStore<float>& store, const Snapshot& s) {
  for (const auto& [name, value] : s) store.at(name).value = value;
}

struct CachedTeacherView {
  RasterOutput raster;
  AttributeImage<float> features;
};

double validation_loss(const Mesh& mesh, const Matrix<float>& features, const std::vector<CachedTeacherView>& views) {
  double total = 0.0;
  for (const auto& v : views) total += encoder_loss(features, mesh, v.raster, v.features).loss;
  return views.empty() ? 0.0 : total / static_cast<double>(views.size());
}

void check_finite(double loss, const char* stage, std::int64_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingAborted(std::string(stage) + ": non-finite loss at step " + std::to_string(step));
  }
}

// Runs one adaptive-moment step, mapping a non-finite gradient to an abort.
void optimizer_step(ParamStore<float>& params, double lr, std::int64_t step, std::string_view prefix) {
  AdamConfig adam;
  adam.learning_rate = lr;
  try {
    adam_step(params, adam, step, prefix);
  } catch (const NumericError& e) {
    throw TrainingAborted(e.what());
  }
}

}  // namespace

double encoder_validation_loss(const Mesh& mesh, const Model& model, const Teacher& teacher,
                               std::span<const std::pair<std::int64_t, Camera>> views) {
  const auto features = compute_feature_field(mesh, model.params, model.encoder).features;
  double total = 0.0;
  for (const auto& [id, cam] : views) {
    const TeacherView view = make_view(mesh, cam, id);
    total += encoder_loss(features, mesh, view.raster, teacher.embed(view)).loss;
  }
  return views.empty() ? 0.0 : total / static_cast<double>(views.size());
}

DistillResult distill_encoder(const Mesh& mesh, const Teacher& teacher, Model& model, const TrainConfig& cfg,
                              TrainingLog& log, std::vector<std::pair<std::int64_t, Camera>> fixed_views) {
  cfg.validate();
  if (teacher.feature_dim() != model.encoder.out_dim) {
    throw std::invalid_argument("teacher feature dimension " + std::to_string(teacher.feature_dim()) +
                                " differs from encoder output " + std::to_string(model.encoder.out_dim));
  }
  const auto n = static_cast<Eigen::Index>(mesh.vertex_count());
  const Matrix<float> pe_all = positional_encode_mesh(mesh, model.encoder.pe_frequencies).cast<float>();

  std::vector<std::pair<std::int64_t, Camera>> train_views;
  std::vector<std::pair<std::int64_t, Camera>> held_views;
  if (fixed_views.empty()) {
    const auto cams = sample_cameras(cfg, SeedStream::validation_views, cfg.validation_views);
    for (std::size_t i = 0; i < cams.size(); ++i) held_views.emplace_back(-1 - static_cast<std::int64_t>(i), cams[i]);
  } else {
    for (std::size_t i = 0; i < fixed_views.size(); ++i) {
      (i % 8 == 7 ? held_views : train_views).push_back(fixed_views[i]);
    }
    if (train_views.empty()) throw std::invalid_argument("distill_encoder: no training views");
  }
  std::vector<CachedTeacherView> held;
  for (const auto& [id, cam] : held_views) {
    TeacherView view = make_view(mesh, cam, id);
    auto feats = teacher.embed(view);
    held.push_back({std::move(view.raster), std::move(feats)});
  }

  DistillResult result;
  result.initial_validation_loss = validation_loss(mesh, compute_feature_field(mesh, model.params, model.encoder).features, held);
  result.final_validation_loss = result.initial_validation_loss;
  double best = result.initial_validation_loss;
  Snapshot best_params = snapshot(model.params, kEncoderPrefix);

  ViewSampler sampler(cfg.view_policy(), derive_seed(cfg.seed, SeedStream::distill_views));
  Rng order_rng(derive_seed(cfg.seed, SeedStream::distill_views) ^ 0x5bd1e995ULL);
  std::int64_t step = 0;
  try {
    for (int epoch = 0; epoch < cfg.encoder_epochs; ++epoch) {
      std::vector<std::pair<std::int64_t, Camera>> views;
      if (fixed_views.empty()) {
        for (int i = 0; i < cfg.views_per_epoch; ++i) {
          views.emplace_back(static_cast<std::int64_t>(epoch) * cfg.views_per_epoch + i, sampler.next());
        }
      } else {
        views = train_views;
        order_rng.shuffle(views);
      }
      double epoch_loss = 0.0;
      int counted = 0;
      for (const auto& [id, cam] : views) {
        const TeacherView view = make_view(mesh, cam, id);
        const auto active = active_vertices(view.raster, mesh.faces, mesh.vertex_count());
        if (active.empty()) continue;
        const AttributeImage<float> target = teacher.embed(view);
        auto [f_active, trace] = encoder_forward(gather_rows(pe_all, active), model.params, model.encoder);
        Matrix<float> f_full = Matrix<float>::Zero(n, f_active.cols());
        scatter_add_rows(f_full, f_active, active);
        const auto loss = encoder_loss(f_full, mesh, view.raster, target);
        check_finite(loss.loss, "distill", step + 1);
        encoder_backward(trace, gather_rows(loss.grad_features, active), model.params, model.encoder);
        optimizer_step(model.params, cfg.encoder_learning_rate, ++step, kEncoderPrefix);
        epoch_loss += loss.loss;
        ++counted;
      }
      const double val =
          validation_loss(mesh, compute_feature_field(mesh, model.params, model.encoder).features, held);
      check_finite(val, "distill validation", step);
      log.write({"encoder", epoch, step, {{"train_loss", counted ? epoch_loss / counted : 0.0}, {"validation_loss", val}}},
                cfg.seed);
      if (val < best) {
        best = val;
        best_params = snapshot(model.params, kEncoderPrefix);
        result.best_epoch = epoch;
      }
    }
  } catch (const TrainingAborted&) {
    restore(model.params, best_params);
    model.params.zero_grad();
    model.refresh_features(mesh);
    throw;
  }
  restore(model.params, best_params);
  result.final_validation_loss = best;
  result.steps = step;
  model.stage = "encoder";
  model.refresh_features(mesh);
  return result;
}

ClickDataset generate_click_dataset(const Mesh& mesh, const Teacher& teacher, const TrainConfig& cfg,
                                    std::ostream* warnings) {
  cfg.validate();
  ClickDataset ds;
  ds.manifest.width = cfg.image_size;
  ds.manifest.height = cfg.image_size;
  ds.manifest.feature_dim = teacher.feature_dim();
  ds.train_vertices =
      sample_training_vertices(mesh, cfg.train_vertex_fraction, derive_seed(cfg.seed, SeedStream::train_vertices));
  ViewSampler sampler(cfg.view_policy(), derive_seed(cfg.seed, SeedStream::click_views));
  Rng second_rng(derive_seed(cfg.seed, SeedStream::second_clicks));

  auto mask_name = [](std::size_t idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "mask_%06zu.pgm", idx);
    return std::string(buf);
  };
  auto add_sample = [&](std::int64_t view_id, const Camera& cam, std::vector<PromptPixel> prompts,
                        std::vector<Click> clicks, MaskImage mask) {
    const std::size_t idx = ds.manifest.samples.size();
    ds.manifest.samples.push_back({view_id, cam, std::move(prompts), mask_name(idx), "", std::move(clicks)});
    ds.masks.push_back(std::move(mask));
    return idx;
  };

  struct Phase1View {
    TeacherView view;
    PromptPixel prompt;
    std::int32_t vertex;
    std::size_t sample;
  };
  std::vector<Phase1View> phase1;
  std::int64_t next_view_id = 0;
  for (auto v : ds.train_vertices) {
    ClickRecord record;
    record.first_click = v;
    for (int k = 0; k < cfg.views_per_vertex; ++k) {
      for (int attempt = 0; attempt < cfg.max_resample_attempts; ++attempt) {
        TeacherView view = make_view(mesh, sampler.next(), next_view_id);
        const ClickProjection pc = project_click(mesh, view.camera, view.raster, v);
        if (!pc.visible) continue;
        ++next_view_id;
        const PromptPixel prompt{pc.x, pc.y, ClickSign::positive};
        MaskImage mask = teacher.segment(view, std::span(&prompt, 1));
        const auto idx = add_sample(view.view_id, view.camera, {prompt}, {{v, ClickSign::positive}}, std::move(mask));
        record.samples.push_back(idx);
        phase1.push_back({std::move(view), prompt, v, idx});
        break;
      }
    }
    if (record.samples.empty()) {
      ds.skipped_vertices.push_back(v);
      if (warnings != nullptr) {
        *warnings << "warning: vertex " << v << " not visible in " << cfg.max_resample_attempts
                  << " sampled views; skipped\n";
      }
      continue;
    }
    ds.records.push_back(std::move(record));
  }

  for (const auto& p1 : phase1) {
    const MaskImage& first_mask = ds.masks[p1.sample];
    const double area1 = static_cast<double>(first_mask.area());
    const std::size_t p1_pixel = static_cast<std::size_t>(p1.prompt.y) * first_mask.width + p1.prompt.x;
    std::vector<std::int32_t> candidates;
    std::vector<ClickProjection> projections;
    for (auto u : visible_vertices(mesh, p1.view.camera, p1.view.raster)) {
      if (u == p1.vertex) continue;
      const ClickProjection pu = project_click(mesh, p1.view.camera, p1.view.raster, u);
      if (pu.x == p1.prompt.x && pu.y == p1.prompt.y) continue;
      candidates.push_back(u);
      projections.push_back(pu);
    }
    if (candidates.empty()) continue;
    for (int attempt = 0; attempt < cfg.max_resample_attempts; ++attempt) {
      const auto pick = second_rng.uniform_index(candidates.size());
      const ClickSign sign = second_rng.uniform() < 0.5 ? ClickSign::positive : ClickSign::negative;
      const std::vector<PromptPixel> prompts = {p1.prompt, {projections[pick].x, projections[pick].y, sign}};
      MaskImage mask = teacher.segment(p1.view, prompts);
      const double area2 = static_cast<double>(mask.area());
      const double thr = cfg.second_click_change_threshold;
      const bool changed = sign == ClickSign::positive ? area2 >= area1 * (1.0 + thr) : area2 <= area1 * (1.0 - thr);
      if (!changed || !mask.data[p1_pixel]) {
        ++ds.rejected_second_clicks;
        continue;
      }
      const Click second{candidates[pick], sign};
      ClickRecord record;
      record.first_click = p1.vertex;
      record.second_click = second;
      record.samples.push_back(add_sample(p1.view.view_id, p1.view.camera, prompts,
                                          {{p1.vertex, ClickSign::positive}, second}, std::move(mask)));
      ds.records.push_back(std::move(record));
      break;
    }
  }
  return ds;
}

void write_click_dataset(const std::filesystem::path& dir, const ClickDataset& dataset, const Mesh& mesh,
                         const Teacher* feature_teacher) {
  std::filesystem::create_directories(dir);
  DatasetManifest manifest = dataset.manifest;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) write_mask_pgm(dir / manifest.samples[i].mask_file, dataset.masks[i]);
  if (feature_teacher != nullptr) {
    manifest.feature_dim = feature_teacher->feature_dim();
    std::map<std::int64_t, std::string> written;
    for (auto& s : manifest.samples) {
      auto it = written.find(s.view_id);
      if (it == written.end()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "view_%06lld.mffi", static_cast<long long>(s.view_id));
        write_mffi(dir / buf, feature_teacher->embed(make_view(mesh, s.camera, s.view_id)));
        it = written.emplace(s.view_id, buf).first;
      }
      s.feature_file = it->second;
    }
  }
  write_dataset_manifest(dir, manifest);
}

ClickDataset read_click_dataset(const std::filesystem::path& dir) {
  ClickDataset ds;
  ds.manifest = read_dataset_manifest(dir);
  std::map<std::int32_t, std::size_t> single_record;
  std::set<std::int32_t> firsts;
  for (std::size_t i = 0; i < ds.manifest.samples.size(); ++i) {
    const auto& s = ds.manifest.samples[i];
    ds.masks.push_back(read_mask_pgm(dir / s.mask_file));
    if (s.clicks.empty() || s.clicks.front().sign != ClickSign::positive) {
      throw FormatError("sample " + std::to_string(i) + " has no leading positive vertex click");
    }
    const std::int32_t first = s.clicks.front().vertex;
    firsts.insert(first);
    if (s.clicks.size() == 1) {
      auto [it, inserted] = single_record.emplace(first, ds.records.size());
      if (inserted) ds.records.push_back({first, std::nullopt, {}});
      ds.records[it->second].samples.push_back(i);
    } else {
      ClickRecord r{first, s.clicks[1], {i}};
      ds.records.push_back(std::move(r));
    }
  }
  ds.train_vertices.assign(firsts.begin(), firsts.end());
  return ds;
}

template <class T>
DecoderSampleLoss<T> decoder_sample_loss(const Mesh& mesh, const RasterOutput& raster, const Matrix<T>& features,
                                         const ClickSet& clicks, const MaskImage& mask, ParamStore<T>& params,
                                         const DecoderConfig& config) {
  if (mask.width != raster.width || mask.height != raster.height) {
    throw ShapeError("decoder loss: mask size differs from the view");
  }
  const auto n = static_cast<Eigen::Index>(mesh.vertex_count());
  DecoderSampleLoss<T> out;
  out.grad_features = Matrix<T>::Zero(n, features.cols());
  const auto active = active_vertices(raster, mesh.faces, mesh.vertex_count());
  if (active.empty()) return out;
  auto [probs, trace] = segment_forward(features, clicks, active, params, config);
  Matrix<T> full = Matrix<T>::Zero(n, DecoderConfig::kOutputChannels);
  scatter_add_rows(full, probs, active);
  const AttributeImage<T> image = shade_attributes(raster, full, mesh.faces);
  Matrix<T> target(image.values.rows(), 2);
  for (Eigen::Index pix = 0; pix < target.rows(); ++pix) {
    const T m = mask.data[static_cast<std::size_t>(pix)] ? T(1) : T(0);
    target(pix, 0) = m;
    target(pix, 1) = T(1) - m;
  }
  auto bce = binary_cross_entropy(image.values, target, raster.coverage());
  out.loss = bce.loss;
  out.covered_pixels = bce.counted_rows;
  const AttributeImage<T> grad_image{raster.width, raster.height, std::move(bce.grad)};
  const Matrix<T> grad_full = shade_backward(raster, mesh.faces, grad_image, mesh.vertex_count());
  out.grad_features = segment_backward(trace, gather_rows(grad_full, active), params, config);
  return out;
}

template DecoderSampleLoss<float> decoder_sample_loss(const Mesh&, const RasterOutput&, const Matrix<float>&,
                                                      const ClickSet&, const MaskImage&, ParamStore<float>&,
                                                      const DecoderConfig&);
template DecoderSampleLoss<double> decoder_sample_loss(const Mesh&, const RasterOutput&, const Matrix<double>&,
                                                       const ClickSet&, const MaskImage&, ParamStore<double>&,
                                                       const DecoderConfig&);

namespace {

struct StageSpec {
  const char* stage;       // log tag and final model.stage
  bool joint = false;
};

DecoderTrainResult run_stage2(const Mesh& mesh, Model& model, const ClickDataset& dataset, const Teacher& teacher,
                              const TrainConfig& cfg, TrainingLog& log, const StageSpec& spec) {
  cfg.validate();
  if (dataset.manifest.samples.empty()) throw std::invalid_argument("click dataset is empty");
  if (model.mesh_hash != mesh_hash(mesh)) throw std::invalid_argument("model was built for a different mesh");
  if (spec.joint && teacher.feature_dim() != model.encoder.out_dim) {
    throw std::invalid_argument("teacher feature dimension differs from encoder output");
  }
  const std::uint64_t encoder_hash = model.params.hash(kEncoderPrefix);
  const auto n = static_cast<Eigen::Index>(mesh.vertex_count());
  const Matrix<float> pe_all =
      spec.joint ? positional_encode_mesh(mesh, model.encoder.pe_frequencies).cast<float>() : Matrix<float>();
  model.refresh_features(mesh);
  model.stage = spec.stage;

  const auto val_cams = sample_cameras(cfg, SeedStream::validation_views, cfg.validation_views);
  const auto val_seed = derive_seed(cfg.seed, SeedStream::validation_clicks);
  Rng order_rng(derive_seed(cfg.seed, SeedStream::decoder_order));

  DecoderTrainResult result;
  result.best_validation_iou = -1.0;
  Snapshot best_params = snapshot(model.params, spec.joint ? "" : kDecoderPrefix);
  std::vector<std::size_t> order(dataset.manifest.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::int64_t step = 0;
  try {
    for (int epoch = 0; epoch < cfg.decoder_epochs; ++epoch) {
      order_rng.shuffle(order);
      double dec_sum = 0.0;
      double enc_sum = 0.0;
      int counted = 0;
      for (auto idx : order) {
        const auto& sample = dataset.manifest.samples[idx];
        const ClickSet clicks = ClickSet::create(sample.clicks, mesh.vertex_count());
        const TeacherView view = make_view(mesh, sample.camera, sample.view_id);
        if (view.raster.covered_count() == 0) continue;
        if (!spec.joint) {
          const auto l = decoder_sample_loss(mesh, view.raster, model.features, clicks, dataset.masks[idx],
                                             model.params, model.decoder);
          check_finite(l.loss, spec.stage, step + 1);
          optimizer_step(model.params, cfg.decoder_learning_rate, ++step, kDecoderPrefix);
          dec_sum += l.loss;
        } else {
          auto rows = active_vertices(view.raster, mesh.faces, mesh.vertex_count());
          for (const Click& c : clicks.entries()) rows.push_back(c.vertex);
          std::sort(rows.begin(), rows.end());
          rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
          auto [f_rows, trace] = encoder_forward(gather_rows(pe_all, rows), model.params, model.encoder);
          Matrix<float> f_full = Matrix<float>::Zero(n, f_rows.cols());
          scatter_add_rows(f_full, f_rows, rows);
          const auto dec = decoder_sample_loss(mesh, view.raster, f_full, clicks, dataset.masks[idx], model.params,
                                               model.decoder);
          const auto enc = encoder_loss(f_full, mesh, view.raster, teacher.embed(view));
          const double w = cfg.joint_encoder_weight;
          check_finite(w * enc.loss + dec.loss, spec.stage, step + 1);
          const Matrix<float> grad = static_cast<float>(w) * enc.grad_features + dec.grad_features;
          encoder_backward(trace, gather_rows(grad, rows), model.params, model.encoder);
          ++step;
          optimizer_step(model.params, cfg.encoder_learning_rate, step, kEncoderPrefix);
          optimizer_step(model.params, cfg.decoder_learning_rate, step, kDecoderPrefix);
          dec_sum += dec.loss;
          enc_sum += enc.loss;
        }
        ++counted;
      }
      if (spec.joint) model.refresh_features(mesh);
      const double val = heldout_mask_iou(mesh, model, teacher, val_cams, dataset.train_vertices, val_seed).mean_iou;
      TrainingLog::Entry entry{spec.stage, epoch, step, {}};
      const double denom = counted ? counted : 1;
      if (spec.joint) {
        entry.terms = {{"encoder_loss", enc_sum / denom},
                       {"decoder_loss", dec_sum / denom},
                       {"total_loss", (cfg.joint_encoder_weight * enc_sum + dec_sum) / denom},
                       {"validation_iou", val}};
      } else {
        entry.terms = {{"train_loss", dec_sum / denom}, {"validation_iou", val}};
      }
      log.write(entry, cfg.seed);
      result.final_train_loss = dec_sum / denom;
      if (val > result.best_validation_iou) {
        result.best_validation_iou = val;
        result.best_epoch = epoch;
        best_params = snapshot(model.params, spec.joint ? "" : kDecoderPrefix);
      }
    }
  } catch (const TrainingAborted&) {
    restore(model.params, best_params);
    model.params.zero_grad();
    model.refresh_features(mesh);
    throw;
  }
  restore(model.params, best_params);
  model.params.zero_grad();
  if (spec.joint) model.refresh_features(mesh);
  if (!spec.joint && model.params.hash(kEncoderPrefix) != encoder_hash) {
    throw std::logic_error("encoder parameters changed during decoder training");
  }
  result.steps = step;
  return result;
}

}  // namespace

DecoderTrainResult train_decoder(const Mesh& mesh, Model& model, const ClickDataset& dataset, const Teacher& teacher,
                                 const TrainConfig& cfg, TrainingLog& log) {
  return run_stage2(mesh, model, dataset, teacher, cfg, log, {"two-stage", false});
}

DecoderTrainResult train_joint_ablation(const Mesh& mesh, Model& model, const ClickDataset& dataset,
                                        const Teacher& teacher, const TrainConfig& cfg, TrainingLog& log) {
  return run_stage2(mesh, model, dataset, teacher, cfg, log, {"joint", true});
}

}  // namespace meshclick
