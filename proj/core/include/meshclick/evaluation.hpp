#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "meshclick/decoder.hpp"
#include "meshclick/geometry.hpp"
#include "meshclick/rasterizer.hpp"
#include "meshclick/teacher.hpp"

namespace meshclick {

using BinaryMask3D = std::vector<std::uint8_t>;

// |a and b| / |a or b|; 1 when both are empty. Throws std::invalid_argument on
// a length mismatch.
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

struct OtsuResult {
  double threshold = 0.5;
  bool degenerate = false;  // fewer than two occupied bins; threshold is the mean
};

// Histogram over [0, 1] (values clamped). Class 0 holds bins 0..k, the
// threshold is the upper edge (k + 1) / bins, and the k with the largest
// between-class variance wins; near-ties go to the lowest k.
OtsuResult otsu_threshold(std::span<const double> p, int bins = 256);

// p >= threshold
BinaryMask3D binarize(std::span<const double> p, double threshold);
BinaryMask3D otsu_binarize(std::span<const double> p);

// Per-vertex segmenter used by the stability harness.
using ClickSegmenter = std::function<ProbabilityField(std::int32_t vertex)>;

struct StabilityReport {
  std::string method;
  std::vector<std::int32_t> clicks;
  std::vector<double> per_click_iou;        // Otsu-binarized
  std::vector<double> per_click_iou_fixed;  // 0.5 threshold, for comparison
  double mean_iou = 0.0;
  double mean_iou_fixed = 0.0;
  std::size_t click_count() const { return clicks.size(); }
};

// For each click c: mean IoU between the mask of c and the mask of every
// one-ring neighbour of c, each clicked alone as a positive. Segmentations
// are memoized per vertex.
StabilityReport stability_eval(const Mesh& mesh, const ClickSegmenter& segmenter,
                               std::span<const std::int32_t> clicks, std::string method);
// Rejects a model without a trained decoder.
StabilityReport stability_eval(const Mesh& mesh, const Model& model, std::span<const std::int32_t> clicks);

std::string stability_report_json(const StabilityReport& report);
void write_stability_csv(std::ostream& out, const StabilityReport& report);

struct FusionConfig {
  int num_views = 100;
  // Give up on a vertex after scanning this many candidate views.
  int max_candidate_views = 2000;
  ViewPolicy views;
  std::uint64_t seed = 17;
};

// Multi-view baseline: per view where the click is visible, the teacher mask
// for a prompt at the click's pixel is read back at every visible vertex's
// nearest pixel; a vertex's value is the mean over the views that saw it.
// Candidate views come from one seeded camera stream and are rasterized once,
// so repeated queries are cheap. Not thread-safe.
class FusionBaseline {
 public:
  FusionBaseline(const Mesh& mesh, const Teacher& teacher, FusionConfig config = {});
  // Throws std::runtime_error when the click is never visible.
  ProbabilityField segment(std::int32_t click);
  // Views that contributed to the last segment() call.
  int last_view_count() const { return last_views_; }

 private:
  struct CachedView {
    TeacherView view;
    std::vector<ClickProjection> projections;  // per vertex
  };
  const CachedView& candidate(std::size_t i);

  const Mesh& mesh_;
  const Teacher& teacher_;
  FusionConfig config_;
  ViewSampler sampler_;
  std::vector<CachedView> cache_;
  int last_views_ = 0;
};

ProbabilityField fusion_baseline(const Mesh& mesh, const Teacher& teacher, std::int32_t click,
                                 FusionConfig config = {});

struct ConsistencyReport {
  bool consistent = true;
  std::size_t vertices_compared = 0;  // vertices visible in two or more views
  std::size_t disagreements = 0;
  double max_discrepancy = 0.0;
};

inline constexpr double kConsistencyTolerance = 1e-4;

// Renders the field in every view and reads each visible vertex back at its
// exact projection (interpolating on the incident face that contains it).
ConsistencyReport consistency_check(const Mesh& mesh, const ProbabilityField& field, std::span<const Camera> views,
                                    double tolerance = kConsistencyTolerance);
// The same over one segmentation per click set; reports are merged.
ConsistencyReport consistency_check(const Mesh& mesh, const Model& model, std::span<const ClickSet> clicks,
                                    std::span<const Camera> views, double tolerance = kConsistencyTolerance);
// The check applied to independent per-view masks: a visible vertex reads its
// nearest pixel in each view's mask.
ConsistencyReport mask_consistency_check(const Mesh& mesh, std::span<const Camera> views,
                                         std::span<const MaskImage> masks, double tolerance = kConsistencyTolerance);

// Keys and values from a source shape's click rows, queries from the target
// shape, decoded by the target model. Clicks index the source mesh.
ProbabilityField cross_domain_segment(const Matrix<float>& source_features, const ClickSet& source_clicks,
                                      const Model& target);

struct HeldoutIouReport {
  std::vector<double> per_view_iou;
  std::vector<std::int32_t> clicked;
  double mean_iou = 0.0;
};

// Rendered-mask agreement on unseen views and unseen vertices: per camera a
// random visible vertex outside `excluded` is clicked alone, the model's
// field is rendered and thresholded at 0.5, and IoU against the teacher mask
// is taken over pixels. Views without an eligible vertex are skipped.
HeldoutIouReport heldout_mask_iou(const Mesh& mesh, const Model& model, const Teacher& teacher,
                                  std::span<const Camera> cameras, std::span<const std::int32_t> excluded,
                                  std::uint64_t seed);

}  // namespace meshclick
