#include "meshclick/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace meshclick {

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("iou: mask lengths differ (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0;
    const bool y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

OtsuResult otsu_threshold(std::span<const double> p, int bins) {
  if (p.size() < 2) throw std::invalid_argument("otsu_threshold: need at least two values");
  if (bins < 2) throw std::invalid_argument("otsu_threshold: need at least two bins");
  std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> sum(static_cast<std::size_t>(bins), 0.0);
  double total = 0.0;
  for (double raw : p) {
    if (!std::isfinite(raw)) throw std::invalid_argument("otsu_threshold: non-finite probability");
    const double v = std::clamp(raw, 0.0, 1.0);
    const auto b = std::min(bins - 1, static_cast<int>(v * bins));
    count[static_cast<std::size_t>(b)] += 1.0;
    sum[static_cast<std::size_t>(b)] += v;
    total += v;
  }
  const double n = static_cast<double>(p.size());
  const auto occupied = std::count_if(count.begin(), count.end(), [](double c) { return c > 0.0; });
  if (occupied < 2) return {total / n, true};

  std::vector<double> score(static_cast<std::size_t>(bins - 1), -1.0);
  double n0 = 0.0;
  double s0 = 0.0;
  double best = -1.0;
  for (int k = 0; k + 1 < bins; ++k) {
    n0 += count[static_cast<std::size_t>(k)];
    s0 += sum[static_cast<std::size_t>(k)];
    const double n1 = n - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double diff = s0 / n0 - (total - s0) / n1;
    score[static_cast<std::size_t>(k)] = (n0 / n) * (n1 / n) * diff * diff;
    best = std::max(best, score[static_cast<std::size_t>(k)]);
  }
  for (int k = 0; k + 1 < bins; ++k) {
    if (score[static_cast<std::size_t>(k)] >= best * (1.0 - 1e-12)) {
      return {static_cast<double>(k + 1) / bins, false};
    }
  }
  return {total / n, true};  // unreachable with two occupied bins
}

BinaryMask3D binarize(std::span<const double> p, double threshold) {
  BinaryMask3D out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] >= threshold;
  return out;
}

BinaryMask3D otsu_binarize(std::span<const double> p) { return binarize(p, otsu_threshold(p).threshold); }

StabilityReport stability_eval(const Mesh& mesh, const ClickSegmenter& segmenter,
                               std::span<const std::int32_t> clicks, std::string method) {
  StabilityReport report;
  report.method = std::move(method);
  std::map<std::int32_t, std::pair<BinaryMask3D, BinaryMask3D>> memo;
  auto masks = [&](std::int32_t v) -> const std::pair<BinaryMask3D, BinaryMask3D>& {
    auto it = memo.find(v);
    if (it == memo.end()) {
      const ProbabilityField p = segmenter(v);
      if (p.size() != mesh.vertex_count()) throw std::invalid_argument("segmenter returned a field of wrong length");
      it = memo.emplace(v, std::make_pair(otsu_binarize(p), binarize(p, 0.5))).first;
    }
    return it->second;
  };
  for (auto c : clicks) {
    const auto& ring = one_ring_neighbors(mesh, c);
    if (ring.empty()) continue;
    double acc = 0.0;
    double acc_fixed = 0.0;
    const auto& center = masks(c);  // std::map references survive insertion
    for (auto j : ring) {
      const auto& other = masks(j);
      acc += iou(center.first, other.first);
      acc_fixed += iou(center.second, other.second);
    }
    report.clicks.push_back(c);
    report.per_click_iou.push_back(acc / static_cast<double>(ring.size()));
    report.per_click_iou_fixed.push_back(acc_fixed / static_cast<double>(ring.size()));
  }
  if (!report.clicks.empty()) {
    const double k = static_cast<double>(report.clicks.size());
    for (std::size_t i = 0; i < report.clicks.size(); ++i) {
      report.mean_iou += report.per_click_iou[i] / k;
      report.mean_iou_fixed += report.per_click_iou_fixed[i] / k;
    }
  }
  return report;
}

StabilityReport stability_eval(const Mesh& mesh, const Model& model, std::span<const std::int32_t> clicks) {
  if (!model.has_decoder()) throw std::invalid_argument("stability_eval: model has no trained decoder");
  const auto n = mesh.vertex_count();
  return stability_eval(
      mesh, [&](std::int32_t v) { return model.segment(ClickSet::create({{v, ClickSign::positive}}, n)); }, clicks,
      "engine");
}

std::string stability_report_json(const StabilityReport& report) {
  nlohmann::json j;
  j["version"] = 1;
  j["method"] = report.method;
  j["click_count"] = report.click_count();
  j["mean_iou"] = report.mean_iou;
  j["mean_iou_threshold_0_5"] = report.mean_iou_fixed;
  j["clicks"] = report.clicks;
  j["per_click_iou"] = report.per_click_iou;
  j["per_click_iou_threshold_0_5"] = report.per_click_iou_fixed;
  return j.dump();
}

void write_stability_csv(std::ostream& out, const StabilityReport& report) {
  out << "vertex,iou_otsu,iou_0_5\n";
  for (std::size_t i = 0; i < report.clicks.size(); ++i) {
    out << report.clicks[i] << ',' << report.per_click_iou[i] << ',' << report.per_click_iou_fixed[i] << '\n';
  }
}

FusionBaseline::FusionBaseline(const Mesh& mesh, const Teacher& teacher, FusionConfig config)
    : mesh_(mesh), teacher_(teacher), config_(config), sampler_(config.views, config.seed) {
  if (config_.num_views < 1) throw std::invalid_argument("fusion baseline needs num_views >= 1");
}

const FusionBaseline::CachedView& FusionBaseline::candidate(std::size_t i) {
  while (cache_.size() <= i) {
    CachedView cv;
    cv.view = make_view(mesh_, sampler_.next(), static_cast<std::int64_t>(cache_.size()));
    cv.projections.resize(mesh_.vertex_count());
    for (std::size_t v = 0; v < mesh_.vertex_count(); ++v) {
      cv.projections[v] = project_click(mesh_, cv.view.camera, cv.view.raster, static_cast<std::int32_t>(v));
    }
    // Only the teacher reads the raster from here on; per-face corners are dead weight.
    cv.view.raster.face_screen = {};
    cache_.push_back(std::move(cv));
  }
  return cache_[i];
}

ProbabilityField FusionBaseline::segment(std::int32_t click) {
  if (click < 0 || static_cast<std::size_t>(click) >= mesh_.vertex_count()) {
    throw std::out_of_range("fusion baseline: click vertex out of range");
  }
  std::vector<double> received(mesh_.vertex_count(), 0.0);
  std::vector<double> seen(mesh_.vertex_count(), 0.0);
  int used = 0;
  for (std::size_t i = 0; used < config_.num_views && i < static_cast<std::size_t>(config_.max_candidate_views); ++i) {
    const CachedView& cv = candidate(i);
    const ClickProjection& pc = cv.projections[static_cast<std::size_t>(click)];
    if (!pc.visible) continue;
    const PromptPixel prompt{pc.x, pc.y, ClickSign::positive};
    const MaskImage mask = teacher_.segment(cv.view, std::span(&prompt, 1));
    for (std::size_t v = 0; v < mesh_.vertex_count(); ++v) {
      const ClickProjection& pv = cv.projections[v];
      if (!pv.visible) continue;
      received[v] += mask.data[static_cast<std::size_t>(pv.y) * mask.width + pv.x];
      seen[v] += 1.0;
    }
    ++used;
  }
  last_views_ = used;
  if (used == 0) {
    throw std::runtime_error("fusion baseline: vertex " + std::to_string(click) + " is never visible");
  }
  ProbabilityField out(mesh_.vertex_count(), 0.0);
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (seen[v] > 0.0) out[v] = received[v] / seen[v];
  }
  return out;
}

ProbabilityField fusion_baseline(const Mesh& mesh, const Teacher& teacher, std::int32_t click, FusionConfig config) {
  FusionBaseline fb(mesh, teacher, config);
  return fb.segment(click);
}

namespace {

std::vector<std::vector<std::int32_t>> incident_faces(const Mesh& mesh) {
  std::vector<std::vector<std::int32_t>> out(mesh.vertex_count());
  for (std::size_t f = 0; f < mesh.face_count(); ++f) {
    for (auto v : mesh.faces[f]) out[static_cast<std::size_t>(v)].push_back(static_cast<std::int32_t>(f));
  }
  return out;
}

// Value of the rendered field at a sub-pixel screen point lying on the given
// faces: perspective-correct interpolation on the nearest containing face.
std::optional<double> read_back(const Mesh& mesh, const RasterOutput& raster, const ProbabilityField& field,
                                std::span<const std::int32_t> faces, const ScreenPoint& at) {
  constexpr double kInside = -1e-9;
  double best_depth = std::numeric_limits<double>::infinity();
  std::optional<double> value;
  for (auto fid : faces) {
    const auto& s = raster.face_screen[static_cast<std::size_t>(fid)];
    if (s[0].depth <= 0.0 || s[1].depth <= 0.0 || s[2].depth <= 0.0) continue;
    const double area = (s[1].x - s[0].x) * (s[2].y - s[0].y) - (s[1].y - s[0].y) * (s[2].x - s[0].x);
    if (area == 0.0) continue;
    const double l0 = ((s[2].x - s[1].x) * (at.y - s[1].y) - (s[2].y - s[1].y) * (at.x - s[1].x)) / area;
    const double l1 = ((s[0].x - s[2].x) * (at.y - s[2].y) - (s[0].y - s[2].y) * (at.x - s[2].x)) / area;
    const double l2 = 1.0 - l0 - l1;
    if (l0 < kInside || l1 < kInside || l2 < kInside) continue;
    const double w0 = l0 / s[0].depth;
    const double w1 = l1 / s[1].depth;
    const double w2 = l2 / s[2].depth;
    const double z = 1.0 / (w0 + w1 + w2);
    if (z >= best_depth) continue;
    best_depth = z;
    const Face& f = mesh.faces[static_cast<std::size_t>(fid)];
    value = z * (w0 * field[static_cast<std::size_t>(f[0])] + w1 * field[static_cast<std::size_t>(f[1])] +
                 w2 * field[static_cast<std::size_t>(f[2])]);
  }
  return value;
}

// Shared comparison: values[v] collects one reading per view that sees v.
ConsistencyReport compare_readings(const std::vector<std::vector<double>>& readings, double tolerance) {
  ConsistencyReport r;
  for (const auto& vals : readings) {
    if (vals.size() < 2) continue;
    ++r.vertices_compared;
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    const double spread = *hi - *lo;
    r.max_discrepancy = std::max(r.max_discrepancy, spread);
    if (spread > tolerance) ++r.disagreements;
  }
  r.consistent = r.disagreements == 0;
  return r;
}

void merge_into(ConsistencyReport& total, const ConsistencyReport& part) {
  total.consistent = total.consistent && part.consistent;
  total.vertices_compared += part.vertices_compared;
  total.disagreements += part.disagreements;
  total.max_discrepancy = std::max(total.max_discrepancy, part.max_discrepancy);
}

}  // namespace

ConsistencyReport consistency_check(const Mesh& mesh, const ProbabilityField& field, std::span<const Camera> views,
                                    double tolerance) {
  if (field.size() != mesh.vertex_count()) throw std::invalid_argument("consistency_check: field length mismatch");
  const auto incident = incident_faces(mesh);
  std::vector<std::vector<double>> readings(mesh.vertex_count());
  for (const Camera& cam : views) {
    const RasterOutput raster = rasterize(mesh, cam);
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      const auto vid = static_cast<std::int32_t>(v);
      if (!project_click(mesh, cam, raster, vid).visible) continue;
      const auto value = read_back(mesh, raster, field, incident[v], project_point(cam, mesh.vertices[v]));
      if (value) readings[v].push_back(*value);
    }
  }
  return compare_readings(readings, tolerance);
}

ConsistencyReport consistency_check(const Mesh& mesh, const Model& model, std::span<const ClickSet> clicks,
                                    std::span<const Camera> views, double tolerance) {
  ConsistencyReport total;
  for (const ClickSet& c : clicks) merge_into(total, consistency_check(mesh, model.segment(c), views, tolerance));
  return total;
}

ConsistencyReport mask_consistency_check(const Mesh& mesh, std::span<const Camera> views,
                                         std::span<const MaskImage> masks, double tolerance) {
  if (views.size() != masks.size()) throw std::invalid_argument("mask_consistency_check: one mask per view");
  std::vector<std::vector<double>> readings(mesh.vertex_count());
  for (std::size_t k = 0; k < views.size(); ++k) {
    const RasterOutput raster = rasterize(mesh, views[k]);
    if (masks[k].width != raster.width || masks[k].height != raster.height) {
      throw std::invalid_argument("mask_consistency_check: mask size differs from its view");
    }
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      const ClickProjection pc = project_click(mesh, views[k], raster, static_cast<std::int32_t>(v));
      if (!pc.visible) continue;
      readings[v].push_back(masks[k].data[static_cast<std::size_t>(pc.y) * masks[k].width + pc.x]);
    }
  }
  return compare_readings(readings, tolerance);
}

ProbabilityField cross_domain_segment(const Matrix<float>& source_features, const ClickSet& source_clicks,
                                      const Model& target) {
  if (!target.has_decoder()) throw std::invalid_argument("cross_domain_segment: target has no trained decoder");
  if (source_features.cols() != target.features.cols()) {
    throw ShapeError("cross_domain_segment: source d=" + std::to_string(source_features.cols()) + " but target d=" +
                     std::to_string(target.features.cols()));
  }
  for (const Click& c : source_clicks.entries()) {
    if (c.vertex >= source_features.rows()) throw ClickError("source click out of range");
  }
  const auto [g, trace] =
      interactive_attention_forward(target.features, gather_rows(source_features, source_clicks.positives()),
                                    gather_rows(source_features, source_clicks.negatives()), target.params);
  const auto [p, dtrace] = decode_forward(target.features, g, target.params, target.decoder);
  ProbabilityField out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = p(i, 0);
  return out;
}

HeldoutIouReport heldout_mask_iou(const Mesh& mesh, const Model& model, const Teacher& teacher,
                                  std::span<const Camera> cameras, std::span<const std::int32_t> excluded,
                                  std::uint64_t seed) {
  std::vector<std::uint8_t> skip(mesh.vertex_count(), 0);
  for (auto v : excluded) skip.at(static_cast<std::size_t>(v)) = 1;
  Rng rng(seed);
  HeldoutIouReport report;
  for (std::size_t k = 0; k < cameras.size(); ++k) {
    const TeacherView view = make_view(mesh, cameras[k], static_cast<std::int64_t>(k));
    std::vector<std::int32_t> eligible;
    for (auto v : visible_vertices(mesh, view.camera, view.raster)) {
      if (!skip[static_cast<std::size_t>(v)]) eligible.push_back(v);
    }
    if (eligible.empty()) continue;
    const auto vid = eligible[rng.uniform_index(eligible.size())];
    const ClickProjection pc = project_click(mesh, view.camera, view.raster, vid);
    const PromptPixel prompt{pc.x, pc.y, ClickSign::positive};
    const MaskImage target = teacher.segment(view, std::span(&prompt, 1));
    const ProbabilityField p = model.segment(ClickSet::create({{vid, ClickSign::positive}}, mesh.vertex_count()));
    Matrix<double> attrs(static_cast<Eigen::Index>(p.size()), 1);
    for (std::size_t i = 0; i < p.size(); ++i) attrs(static_cast<Eigen::Index>(i), 0) = p[i];
    const auto img = shade_attributes<double>(view.raster, attrs, mesh.faces);
    std::vector<std::uint8_t> pred(view.raster.pixel_count(), 0);
    for (std::size_t pix = 0; pix < pred.size(); ++pix) {
      pred[pix] = view.raster.covered(pix) && img.values(static_cast<Eigen::Index>(pix), 0) >= 0.5;
    }
    report.per_view_iou.push_back(iou(pred, target.data));
    report.clicked.push_back(vid);
  }
  if (!report.per_view_iou.empty()) {
    double s = 0.0;
    for (double x : report.per_view_iou) s += x;
    report.mean_iou = s / static_cast<double>(report.per_view_iou.size());
  }
  return report;
}

}  // namespace meshclick
