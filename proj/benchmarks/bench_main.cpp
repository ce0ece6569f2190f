#include <benchmark/benchmark.h>

#include "meshclick/runtime.hpp"
#include "meshclick/service.hpp"
#include "meshclick/training.hpp"

using namespace meshclick;

namespace {

Camera camera(int size) {
  Camera c;
  c.azimuth = 0.7;
  c.elevation = 0.4;
  c.width = c.height = size;
  return c;
}

const Mesh& table3k() {
  static const Mesh m = make_table(3000);
  return m;
}

const Mesh& sphere() {
  static const Mesh m = make_icosphere(3);
  return m;
}

// Full-size model, untrained weights: cost does not depend on their values.
Model full_model(const Mesh& mesh) {
  Model m = make_untrained_model(mesh, EncoderConfig{}, DecoderConfig{}, 1);
  m.stage = "two-stage";
  return m;
}

void BM_Segment(benchmark::State& state, const Mesh& (*mesh_fn)()) {
  const Mesh& mesh = mesh_fn();
  const Model model = full_model(mesh);
  std::vector<Click> clicks{{5, ClickSign::positive}};
  for (int i = 1; i < state.range(0); ++i)
    clicks.push_back({static_cast<std::int32_t>(97 * i), i % 2 ? ClickSign::negative : ClickSign::positive});
  const ClickSet set = ClickSet::create(clicks, mesh.vertex_count());
  for (auto _ : state) benchmark::DoNotOptimize(model.segment(set));
  state.counters["vertices"] = static_cast<double>(mesh.vertex_count());
}

void BM_ServiceSegment(benchmark::State& state) {
  SegmentationService svc(table3k());
  svc.load_model(full_model(table3k()));
  const std::string body = R"({"clicks":[{"vertex":5,"sign":"positive"},{"vertex":900,"sign":"negative"}]})";
  for (auto _ : state) benchmark::DoNotOptimize(svc.post_segment(body));
}

void BM_Rasterize(benchmark::State& state) {
  const Camera cam = camera(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(rasterize(table3k(), cam));
}

void BM_FeatureField(benchmark::State& state) {
  const Model model = full_model(sphere());
  for (auto _ : state) benchmark::DoNotOptimize(compute_feature_field(sphere(), model.params, model.encoder));
}

// One stage-1 step without the optimizer: forward, rendered MSE, backward.
void BM_EncoderStep(benchmark::State& state) {
  Model model = full_model(sphere());
  const SyntheticTeacher teacher(sphere());
  const TeacherView view = make_view(sphere(), camera(64));
  AttributeImage<float> target = teacher.embed(view);
  const Matrix<float> pe = positional_encode_mesh(sphere(), model.encoder.pe_frequencies).cast<float>();
  for (auto _ : state) {
    auto [f, trace] = encoder_forward(pe, model.params, model.encoder);
    const auto loss = encoder_loss(f, sphere(), view.raster, target);
    encoder_backward(trace, loss.grad_features, model.params, model.encoder);
  }
}

// One stage-2 step without the optimizer.
void BM_DecoderStep(benchmark::State& state) {
  Model model = full_model(sphere());
  const SyntheticTeacher teacher(sphere());
  const TeacherView view = make_view(sphere(), camera(64));
  const auto vis = visible_vertices(sphere(), view.camera, view.raster);
  const auto pr = project_click(sphere(), view.camera, view.raster, vis.front());
  const PromptPixel prompt{pr.x, pr.y, ClickSign::positive};
  const MaskImage mask = teacher.segment(view, std::span(&prompt, 1));
  const ClickSet set = ClickSet::create({{vis.front(), ClickSign::positive}}, sphere().vertex_count());
  for (auto _ : state)
    benchmark::DoNotOptimize(
        decoder_sample_loss(sphere(), view.raster, model.features, set, mask, model.params, model.decoder));
}

}  // namespace

BENCHMARK_CAPTURE(BM_Segment, table3k, table3k)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Segment, icosphere642, sphere)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ServiceSegment)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Rasterize)->Arg(64)->Arg(224)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_FeatureField)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_EncoderStep)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DecoderStep)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
