#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>

#include "meshclick/checkpoint.hpp"
#include "meshclick/config.hpp"
#include "meshclick/evaluation.hpp"
#include "meshclick/image_io.hpp"
#include "meshclick/runtime.hpp"
#include "meshclick/service.hpp"
#include "meshclick/training.hpp"

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace meshclick;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string mesh;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
};

struct Options {
  Common common;
  std::string checkpoint;
  std::string dataset;
  std::string teacher_dir;
  std::string clicks;
  std::string csv;
  std::string host = "127.0.0.1";
  int port = 8080;
  int count = 100;
  int views = 16;
  int prompts = 1;
  double threshold = -1.0;
  bool baseline = false;
  bool no_features = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--mesh", c.mesh, "OBJ path or builtin:icosphere|builtin:icosphere3|builtin:table")->required();
  cmd->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides train.seed");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_flag("--json", c.json, "machine-readable output on stdout");
}

RunConfig run_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.validate();
  return cfg;
}

Model untrained(const Mesh& mesh, const RunConfig& cfg) {
  return make_untrained_model(mesh, cfg.encoder, cfg.decoder, cfg.train.seed);
}

std::unique_ptr<Teacher> make_teacher(const Mesh& mesh, const RunConfig& cfg, const std::string& dir) {
  if (!dir.empty()) return std::make_unique<FileTeacher>(dir);
  return std::make_unique<SyntheticTeacher>(mesh, cfg.teacher);
}

void emit(const Common& c, const json& j, const std::string& human) {
  if (c.json)
    std::cout << j.dump() << "\n";
  else
    std::cout << human << "\n";
}

// Training stages leave the best parameters in the model before a numeric
// abort propagates; keep them on disk, then let main map the exit code.
template <class Fn>
void save_on_abort(const fs::path& path, Model& model, Fn&& fn) {
  try {
    fn();
  } catch (const TrainingAborted&) {
    save_checkpoint(path, model);
    std::cerr << "training aborted; last good parameters saved to " << path.string() << "\n";
    throw;
  }
}

std::vector<std::int32_t> random_vertices(std::size_t n, int count, std::uint64_t seed) {
  std::vector<std::int32_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  Rng rng(seed);
  rng.shuffle(all);
  all.resize(std::min<std::size_t>(n, static_cast<std::size_t>(std::max(count, 0))));
  return all;
}

int cmd_distill(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  const auto teacher = make_teacher(mesh, cfg, o.teacher_dir);
  std::vector<std::pair<std::int64_t, Camera>> fixed;
  if (auto* ft = dynamic_cast<FileTeacher*>(teacher.get())) fixed = ft->feature_views();

  fs::create_directories(o.common.out);
  std::ofstream log_file(fs::path(o.common.out) / "distill_log.jsonl");
  TrainingLog log(&log_file);
  Model model = untrained(mesh, cfg);
  const fs::path ckpt = fs::path(o.common.out) / "encoder.ckpt";
  DistillResult r;
  save_on_abort(ckpt, model, [&] { r = distill_encoder(mesh, *teacher, model, cfg.train, log, fixed); });
  save_checkpoint(ckpt, model);

  const double ratio = r.final_validation_loss / r.initial_validation_loss;
  emit(o.common,
       {{"checkpoint", ckpt.string()},
        {"initial_validation_loss", r.initial_validation_loss},
        {"final_validation_loss", r.final_validation_loss},
        {"ratio", ratio},
        {"best_epoch", r.best_epoch},
        {"steps", r.steps},
        {"model_id", model.id()}},
       "encoder saved to " + ckpt.string() + ", validation loss ratio " + std::to_string(ratio));
  return 0;
}

int cmd_gen_clicks(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  const SyntheticTeacher teacher(mesh, cfg.teacher);
  const ClickDataset ds = generate_click_dataset(mesh, teacher, cfg.train, &std::cerr);
  write_click_dataset(o.common.out, ds, mesh, o.no_features ? nullptr : &teacher);
  emit(o.common,
       {{"dataset", o.common.out},
        {"samples", ds.manifest.samples.size()},
        {"records", ds.records.size()},
        {"train_vertices", ds.train_vertices},
        {"skipped_vertices", ds.skipped_vertices},
        {"rejected_second_clicks", ds.rejected_second_clicks}},
       std::to_string(ds.manifest.samples.size()) + " samples written to " + o.common.out);
  return 0;
}

int cmd_stage2(const Options& o, bool joint) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  const auto teacher = make_teacher(mesh, cfg, o.teacher_dir);
  const ClickDataset ds = read_click_dataset(o.dataset);
  Model model = o.checkpoint.empty() ? untrained(mesh, cfg) : load_checkpoint(o.checkpoint, mesh);
  if (!joint && model.stage == "init")
    throw std::invalid_argument("train-decoder needs a distilled encoder checkpoint (--checkpoint)");

  fs::create_directories(o.common.out);
  std::ofstream log_file(fs::path(o.common.out) / (joint ? "joint_log.jsonl" : "decoder_log.jsonl"));
  TrainingLog log(&log_file);
  const fs::path ckpt = fs::path(o.common.out) / (joint ? "joint.ckpt" : "model.ckpt");
  DecoderTrainResult r;
  save_on_abort(ckpt, model, [&] {
    r = joint ? train_joint_ablation(mesh, model, ds, *teacher, cfg.train, log)
              : train_decoder(mesh, model, ds, *teacher, cfg.train, log);
  });
  save_checkpoint(ckpt, model);
  emit(o.common,
       {{"checkpoint", ckpt.string()},
        {"stage", model.stage},
        {"best_validation_iou", r.best_validation_iou},
        {"best_epoch", r.best_epoch},
        {"final_train_loss", r.final_train_loss},
        {"steps", r.steps},
        {"model_id", model.id()}},
       "model saved to " + ckpt.string() + ", best validation IoU " + std::to_string(r.best_validation_iou));
  return 0;
}

Model trained_model(const Mesh& mesh, const std::string& path) {
  Model m = load_checkpoint(path, mesh);
  if (!m.has_decoder()) throw std::invalid_argument("checkpoint has no trained decoder (stage " + m.stage + ")");
  return m;
}

int cmd_segment(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const ClickSet clicks = ClickSet::parse(o.clicks, mesh.vertex_count());
  const Model model = trained_model(mesh, o.checkpoint);
  const auto t0 = std::chrono::steady_clock::now();
  const ProbabilityField p = model.segment(clicks);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  const OtsuResult otsu = otsu_threshold(p);
  const auto selected = binarize(p, otsu.threshold);
  const auto count = std::count(selected.begin(), selected.end(), std::uint8_t{1});
  emit(o.common,
       {{"version", 1},
        {"probabilities", p},
        {"threshold_otsu", otsu.threshold},
        {"selected", count},
        {"model_id", model.id()},
        {"elapsed_ms", ms}},
       std::to_string(count) + " of " + std::to_string(p.size()) + " vertices selected (Otsu threshold " +
           std::to_string(otsu.threshold) + ")");
  return 0;
}

int cmd_eval_stability(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  const Model model = trained_model(mesh, o.checkpoint);
  const auto clicks =
      random_vertices(mesh.vertex_count(), o.count, derive_seed(cfg.train.seed, SeedStream::validation_clicks));
  const StabilityReport engine = stability_eval(mesh, model, clicks);

  json j = {{"engine", json::parse(stability_report_json(engine))}};
  std::string human = "engine mean one-ring IoU " + std::to_string(engine.mean_iou);
  if (o.baseline) {
    const SyntheticTeacher teacher(mesh, cfg.teacher);
    FusionBaseline fusion(mesh, teacher, cfg.fusion);
    const StabilityReport base = stability_eval(
        mesh, [&](std::int32_t v) { return fusion.segment(v); }, clicks, "fusion");
    j["fusion"] = json::parse(stability_report_json(base));
    human += ", fusion baseline " + std::to_string(base.mean_iou);
  }
  if (!o.csv.empty()) {
    std::ofstream csv(o.csv);
    write_stability_csv(csv, engine);
  }
  if (!o.common.out.empty()) {
    fs::create_directories(o.common.out);
    std::ofstream(fs::path(o.common.out) / "stability.json") << j.dump(2) << "\n";
  }
  emit(o.common, j, human);
  return 0;
}

int cmd_eval_consistency(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  const Model model = trained_model(mesh, o.checkpoint);
  const auto views = sample_cameras(cfg.train, SeedStream::evaluation_views, o.views);
  std::vector<ClickSet> sets;
  for (auto v : random_vertices(mesh.vertex_count(), o.count,
                                derive_seed(cfg.train.seed, SeedStream::validation_clicks)))
    sets.push_back(ClickSet::create({{v, ClickSign::positive}}, mesh.vertex_count()));
  const ConsistencyReport r = consistency_check(mesh, model, sets, views);
  emit(o.common,
       {{"consistent", r.consistent},
        {"vertices_compared", r.vertices_compared},
        {"disagreements", r.disagreements},
        {"max_discrepancy", r.max_discrepancy},
        {"views", o.views},
        {"queries", sets.size()}},
       std::string(r.consistent ? "consistent" : "INCONSISTENT") + " over " + std::to_string(r.vertices_compared) +
           " vertex comparisons");
  return r.consistent ? 0 : 1;
}

int cmd_export_selection(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const ClickSet clicks = ClickSet::parse(o.clicks, mesh.vertex_count());
  const Model model = trained_model(mesh, o.checkpoint);
  const ProbabilityField p = model.segment(clicks);
  const double t = o.threshold >= 0.0 ? o.threshold : otsu_threshold(p).threshold;
  const auto mask = binarize(p, t);
  // vector<bool> has no contiguous storage to span over
  const auto flags = std::make_unique<bool[]>(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) flags[i] = mask[i] != 0;
  write_selection_ply(mesh, std::span<const bool>(flags.get(), mask.size()), o.common.out);
  const auto count = std::count(mask.begin(), mask.end(), std::uint8_t{1});
  emit(o.common, {{"ply", o.common.out}, {"threshold", t}, {"selected", count}},
       std::to_string(count) + " vertices selected, written to " + o.common.out);
  return 0;
}

// The bundle an external 2D segmenter consumes: one color image per view and
// single positive prompts at randomly chosen visible vertices.
int cmd_render_views(const Options& o) {
  const Mesh mesh = load_mesh_spec(o.common.mesh);
  const RunConfig cfg = run_config(o.common);
  if (o.views < 0 || o.prompts < 1) throw std::invalid_argument("--views must be >= 0 and --prompts >= 1");
  fs::create_directories(o.common.out);
  const auto cams = sample_cameras(cfg.train, SeedStream::evaluation_views, o.views);
  Rng rng(derive_seed(cfg.train.seed, SeedStream::click_views));
  RenderBundle bundle;
  bundle.width = bundle.height = cfg.train.image_size;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const RasterOutput raster = rasterize(mesh, cams[i]);
    BundleView v;
    v.view_id = static_cast<std::int64_t>(i);
    v.camera = cams[i];
    char name[32];
    std::snprintf(name, sizeof name, "view_%06zu.ppm", i);
    v.color_file = name;
    write_color_ppm(fs::path(o.common.out) / name, render_color(mesh, cams[i], raster));
    auto visible = visible_vertices(mesh, cams[i], raster);
    rng.shuffle(visible);
    for (int k = 0; k < o.prompts && k < static_cast<int>(visible.size()); ++k) {
      const auto pr = project_click(mesh, cams[i], raster, visible[k]);
      v.prompt_sets.push_back({PromptPixel{pr.x, pr.y, ClickSign::positive}});
      v.click_sets.push_back({Click{visible[k], ClickSign::positive}});
    }
    bundle.views.push_back(std::move(v));
  }
  write_render_bundle_manifest(o.common.out, bundle);
  emit(o.common, {{"bundle", o.common.out}, {"views", bundle.views.size()}},
       std::to_string(bundle.views.size()) + " views written to " + o.common.out);
  return 0;
}

int cmd_serve(const Options& o) {
  Mesh mesh = load_mesh_spec(o.common.mesh);
  Model model = trained_model(mesh, o.checkpoint);
  SegmentationService service(std::move(mesh));
  service.load_model(std::move(model));
  HttpServer server(service);
  const int port = server.bind(o.host, o.port);
  std::cerr << "serving on http://" << o.host << ":" << port << "\n";
  server.listen();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Interactive click-based mesh segmentation"};
  app.require_subcommand(1);
  Options o;
  int (*run)(const Options&) = nullptr;
  auto sub = [&](const char* name, const char* help, bool needs_out, int (*fn)(const Options&)) {
    auto* c = app.add_subcommand(name, help);
    add_common(c, o.common, needs_out);
    c->callback([&run, fn] { run = fn; });
    return c;
  };

  auto* distill = sub("distill", "stage 1: distill teacher features into the encoder", true, cmd_distill);
  distill->add_option("--teacher-dir", o.teacher_dir, "file-backed teacher dataset instead of the synthetic one");

  auto* gen = sub("gen-clicks", "simulate clicks and write a teacher dataset", true, cmd_gen_clicks);
  gen->add_flag("--no-features", o.no_features, "skip writing feature maps");

  for (bool joint : {false, true}) {
    auto* c = joint ? sub("train-joint", "ablation: encoder and decoder trained together", true,
                          [](const Options& x) { return cmd_stage2(x, true); })
                    : sub("train-decoder", "stage 2: train the decoder on a frozen encoder", true,
                          [](const Options& x) { return cmd_stage2(x, false); });
    auto* ck = c->add_option("--checkpoint", o.checkpoint, "starting checkpoint")->check(CLI::ExistingFile);
    if (!joint) ck->required();
    c->add_option("--dataset", o.dataset, "click dataset directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--teacher-dir", o.teacher_dir, "file-backed teacher for validation and features");
  }

  auto* seg = sub("segment", "segment from clicks", false, cmd_segment);
  seg->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  seg->add_option("--clicks", o.clicks, "e.g. \"12:+,40:-\"")->required();

  auto* stab = sub("eval-stability", "one-ring click stability", false, cmd_eval_stability);
  stab->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  stab->add_option("--count", o.count, "number of random clicks")->check(CLI::PositiveNumber);
  stab->add_flag("--baseline", o.baseline, "also score the multi-view fusion baseline");
  stab->add_option("--csv", o.csv, "per-click CSV dump");

  auto* cons = sub("eval-consistency", "cross-view agreement of rendered fields", false, cmd_eval_consistency);
  cons->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  cons->add_option("--views", o.views)->check(CLI::PositiveNumber);
  cons->add_option("--count", o.count, "number of click queries")->check(CLI::PositiveNumber);

  auto* exp = sub("export-selection", "write the selection as a colored PLY", true, cmd_export_selection);
  exp->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  exp->add_option("--clicks", o.clicks)->required();
  exp->add_option("--threshold", o.threshold, "default: Otsu")->check(CLI::Range(0.0, 1.0));

  auto* rv = sub("render-views", "render the image and prompt bundle for an external segmenter", true,
                 cmd_render_views);
  rv->add_option("--views", o.views)->check(CLI::NonNegativeNumber);
  rv->add_option("--prompts", o.prompts, "prompts per view")->check(CLI::PositiveNumber);

  auto* serve = sub("serve", "HTTP segmentation service", false, cmd_serve);
  serve->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  serve->add_option("--host", o.host);
  serve->add_option("--port", o.port)->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    return run(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const GeometryError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const TeacherError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
