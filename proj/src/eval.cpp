#include "normfill/eval.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "normfill/util.hpp"

namespace normfill {

void MetricAccumulator::add(const DepthMap& pred, const DepthMap& gt) {
  const int H = gt.height(), W = gt.width();
  if (pred.height() != H || pred.width() != W)
    throw std::invalid_argument("metrics: prediction size does not match ground truth");
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (!gt.valid(r, c) || !pred.valid(r, c)) continue;
      const double p = pred.values(r, c), g = gt.values(r, c);
      const double e = p - g;
      se_ += e * e;
      ae_ += std::abs(e);
      const double ie = 1.0 / p - 1.0 / g;
      ise_ += ie * ie;
      iae_ += std::abs(ie);
      rel_ += std::abs(e) / g;
      const double ratio = std::max(p / g, g / p);
      d1_ += ratio < 1.25;
      d2_ += ratio < 1.25 * 1.25;
      d3_ += ratio < 1.25 * 1.25 * 1.25;
      ++n_;
    }
}

MetricReport MetricAccumulator::report() const {
  if (n_ == 0) throw std::runtime_error("metrics: empty evaluation domain");
  MetricReport m;
  m.n_pixels = n_;
  const double inv = 1.0 / double(n_);
  m.rmse_mm = std::sqrt(se_ * inv) * 1000.0;
  m.mae_mm = ae_ * inv * 1000.0;
  m.irmse_per_km = std::sqrt(ise_ * inv) * 1000.0;
  m.imae_per_km = iae_ * inv * 1000.0;
  m.rel = rel_ * inv;
  m.delta1 = 100.0 * double(d1_) * inv;
  m.delta2 = 100.0 * double(d2_) * inv;
  m.delta3 = 100.0 * double(d3_) * inv;
  return m;
}

MetricReport compute_metrics(const DepthMap& pred, const DepthMap& gt) {
  MetricAccumulator acc;
  acc.add(pred, gt);
  return acc.report();
}

EvalResult evaluate_method(const std::vector<Sample>& samples, const CompletionFn& method) {
  if (samples.empty()) throw std::invalid_argument("evaluate_method: no samples");
  EvalResult result;
  MetricAccumulator pooled;
  for (const Sample& s : samples) {
    const DepthMap pred = method(s);
    result.per_sample.emplace_back(s.id, compute_metrics(pred, s.dense));
    pooled.add(pred, s.dense);
  }
  result.pooled = pooled.report();
  return result;
}

namespace {

void metric_row(std::ostringstream& out, const MetricReport& m) {
  out << strprintf("%.6f, %.6f, %.6f, %.6f, %.8f, %.4f, %.4f, %.4f, %lld\n", m.rmse_mm, m.mae_mm,
                   m.irmse_per_km, m.imae_per_km, m.rel, m.delta1, m.delta2, m.delta3,
                   (long long)m.n_pixels);
}

}  // namespace

std::string eval_csv(const EvalResult& result) {
  std::ostringstream out;
  out << "sample_id, rmse_mm, mae_mm, irmse, imae, rel, d1, d2, d3, n_px\n";
  for (const auto& [id, m] : result.per_sample) {
    out << id << ", ";
    metric_row(out, m);
  }
  out << "pooled, ";
  metric_row(out, result.pooled);
  return out.str();
}

std::vector<SweepRow> sparsity_sweep(const std::vector<Sample>& samples,
                                     const CompletionFn& method, uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("sparsity_sweep: no samples");
  std::vector<SweepRow> rows;
  for (int den : {1, 4, 16, 64, 256}) {
    MetricAccumulator acc;
    int64_t kept = 0, total = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
      const Sample thin = subsample_sparse(samples[i], den, splitmix64(seed) ^ i);
      kept += thin.sparse.valid_count();
      total += int64_t(thin.height()) * thin.width();
      // At 1/256 of a few hundred returns a sample can lose every return; no
      // completion method has anything to start from, so it sits this ratio
      // out. Its pixels still count toward the retention figure.
      if (thin.sparse.valid_count() == 0) continue;
      acc.add(method(thin), thin.dense);
    }
    SweepRow row;
    row.denominator = den;
    row.density_pct = 100.0 * double(kept) / double(total);
    if (kept == 0)
      throw std::runtime_error(strprintf(
          "sparsity_sweep: no sample kept any return at ratio 1/%d; the split is too small "
          "for this sparsity", den));
    row.metrics = acc.report();
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "ratio, density_pct, rmse_mm, mae_mm, irmse, imae, rel, d1, d2, d3, n_px\n";
  for (const SweepRow& r : rows) {
    out << strprintf("%.10g, %.6f, ", 1.0 / r.denominator, r.density_pct);
    metric_row(out, r.metrics);
  }
  return out.str();
}

namespace {

// Polynomial approximation of the turbo colormap, domain [0, 1].
void turbo(double t, double& r, double& g, double& b) {
  r = 0.13572138 + t * (4.61539260 +
      t * (-42.66032258 + t * (132.13108234 + t * (-152.94239396 + t * 59.28637049))));
  g = 0.09140261 + t * (2.19418839 +
      t * (4.84296658 + t * (-14.18503333 + t * (4.27729857 + t * 2.82956604))));
  b = 0.10667330 + t * (12.64194608 +
      t * (-60.58204836 + t * (110.36276771 + t * (-89.90310912 + t * 27.34824973))));
}

uint8_t to_u8(double x) {
  return uint8_t(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
}

}  // namespace

ImageU8 render_depth(const DepthMap& d, const DepthRange& range) {
  if (!(range.min < range.max))
    throw std::invalid_argument("render_depth: range.min must be below range.max");
  ImageU8 img;
  img.width = d.width();
  img.height = d.height();
  img.channels = 3;
  img.pixels.assign(size_t(img.width) * img.height * 3, 0);
  for (int r = 0; r < d.height(); ++r)
    for (int c = 0; c < d.width(); ++c) {
      if (!d.valid(r, c)) {
        img.at(r, c, 0) = img.at(r, c, 1) = img.at(r, c, 2) = 0;
        continue;
      }
      const double t =
          std::clamp((double(d.values(r, c)) - range.min) / (range.max - range.min), 0.0, 1.0);
      double cr, cg, cb;
      turbo(t, cr, cg, cb);
      img.at(r, c, 0) = to_u8(cr);
      img.at(r, c, 1) = to_u8(cg);
      img.at(r, c, 2) = to_u8(cb);
    }
  return img;
}

}  // namespace normfill
