#pragma once

#include <functional>
#include <string>
#include <vector>

#include "normfill/image_io.hpp"
#include "normfill/synthdata.hpp"

namespace normfill {

struct MetricReport {
  double rmse_mm = 0;
  double mae_mm = 0;
  double irmse_per_km = 0;
  double imae_per_km = 0;
  double rel = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;  // percent under 1.25, 1.25^2, 1.25^3
  int64_t n_pixels = 0;
};

/// Accumulates squared and absolute errors so per-sample and pixel-pooled
/// reports share one definition.
class MetricAccumulator {
 public:
  void add(const DepthMap& pred, const DepthMap& gt);
  MetricReport report() const;  // throws on an empty evaluation domain

 private:
  double se_ = 0, ae_ = 0, ise_ = 0, iae_ = 0, rel_ = 0;
  int64_t d1_ = 0, d2_ = 0, d3_ = 0, n_ = 0;
};

/// Metrics over pixels valid in both maps; depth errors in millimeters,
/// inverse-depth errors per kilometer, deltas as percentages.
MetricReport compute_metrics(const DepthMap& pred, const DepthMap& gt);

using CompletionFn = std::function<DepthMap(const Sample&)>;

struct EvalResult {
  MetricReport pooled;
  std::vector<std::pair<std::string, MetricReport>> per_sample;
};

EvalResult evaluate_method(const std::vector<Sample>& samples, const CompletionFn& method);

/// Rows: one per sample plus a final pooled row.
std::string eval_csv(const EvalResult& result);

struct SweepRow {
  int denominator = 1;
  double density_pct = 0;
  MetricReport metrics;
};

/// Thins every sparse map by 1, 1/4, 1/16, 1/64 and 1/256 and re-evaluates
/// the method at each retention ratio. Samples thinned to zero returns are
/// left out of that ratio's metrics (they still count toward density).
std::vector<SweepRow> sparsity_sweep(const std::vector<Sample>& samples,
                                     const CompletionFn& method, uint64_t seed);

std::string sweep_csv(const std::vector<SweepRow>& rows);

struct DepthRange {
  double min = 0, max = kZMax;
};

/// Turbo-style color rendering; invalid pixels are black, values clamp to
/// the range. Requires range.min < range.max.
ImageU8 render_depth(const DepthMap& d, const DepthRange& range);

}  // namespace normfill
