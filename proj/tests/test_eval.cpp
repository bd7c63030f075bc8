#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "normfill/baselines.hpp"
#include "normfill/eval.hpp"
#include "normfill/util.hpp"

using namespace normfill;

namespace {

DepthMap dense_map(int h, int w, uint64_t seed, float lo, float hi) {
  auto rng = make_rng(seed, 0);
  std::uniform_real_distribution<float> u(lo, hi);
  DepthMap d(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      d.values(r, c) = u(rng);
      d.valid(r, c) = true;
    }
  return d;
}

void drop_pixels(DepthMap& d, double keep, uint64_t seed) {
  auto rng = make_rng(seed, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < d.height(); ++r)
    for (int c = 0; c < d.width(); ++c)
      if (u(rng) >= keep) {
        d.valid(r, c) = false;
        d.values(r, c) = 0.0f;
      }
}

// The metric formulas recomputed from scratch over gathered pixel lists.
struct ScalarReport {
  double rmse = 0, mae = 0, irmse = 0, imae = 0, rel = 0, d1 = 0, d2 = 0, d3 = 0;
  int64_t n = 0;
};

ScalarReport scalar_metrics(const std::vector<const DepthMap*>& preds,
                            const std::vector<const DepthMap*>& gts) {
  std::vector<double> p, g;
  for (size_t i = 0; i < preds.size(); ++i)
    for (int r = 0; r < gts[i]->height(); ++r)
      for (int c = 0; c < gts[i]->width(); ++c)
        if (gts[i]->valid(r, c) && preds[i]->valid(r, c)) {
          p.push_back(preds[i]->values(r, c));
          g.push_back(gts[i]->values(r, c));
        }
  ScalarReport s;
  s.n = int64_t(p.size());
  if (s.n == 0) return s;
  int64_t k1 = 0, k2 = 0, k3 = 0;
  double se = 0, ae = 0, ise = 0, iae = 0, rel = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    se += (p[i] - g[i]) * (p[i] - g[i]);
    ae += std::abs(p[i] - g[i]);
    ise += (1 / p[i] - 1 / g[i]) * (1 / p[i] - 1 / g[i]);
    iae += std::abs(1 / p[i] - 1 / g[i]);
    rel += std::abs(p[i] - g[i]) / g[i];
    const double ratio = std::max(p[i] / g[i], g[i] / p[i]);
    k1 += ratio < 1.25;
    k2 += ratio < 1.25 * 1.25;
    k3 += ratio < 1.25 * 1.25 * 1.25;
  }
  const double n = double(s.n);
  s.rmse = std::sqrt(se / n) * 1000.0;
  s.mae = ae / n * 1000.0;
  s.irmse = std::sqrt(ise / n) * 1000.0;
  s.imae = iae / n * 1000.0;
  s.rel = rel / n;
  s.d1 = 100.0 * double(k1) / n;
  s.d2 = 100.0 * double(k2) / n;
  s.d3 = 100.0 * double(k3) / n;
  return s;
}

void match_scalar(const MetricReport& m, const ScalarReport& s) {
  CHECK(m.n_pixels == s.n);
  CHECK(m.rmse_mm == doctest::Approx(s.rmse).epsilon(1e-9));
  CHECK(m.mae_mm == doctest::Approx(s.mae).epsilon(1e-9));
  CHECK(m.irmse_per_km == doctest::Approx(s.irmse).epsilon(1e-9));
  CHECK(m.imae_per_km == doctest::Approx(s.imae).epsilon(1e-9));
  CHECK(m.rel == doctest::Approx(s.rel).epsilon(1e-9));
  CHECK(m.delta1 == doctest::Approx(s.d1).epsilon(1e-12));
  CHECK(m.delta2 == doctest::Approx(s.d2).epsilon(1e-12));
  CHECK(m.delta3 == doctest::Approx(s.d3).epsilon(1e-12));
}

Sample smooth_sample(const std::string& id, int h, int w, uint64_t seed, double keep_sparse) {
  Sample s;
  s.id = id;
  s.red = Eigen::ArrayXXf::Constant(h, w, 0.5f);
  s.green = s.red;
  s.blue = s.red;
  s.dense = DepthMap(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      s.dense.values(r, c) =
          float(3.0 + 1.5 * std::sin(0.37 * r) * std::cos(0.23 * c) + 0.02 * r + 0.01 * c);
      s.dense.valid(r, c) = true;
    }
  s.sparse = s.dense;
  if (keep_sparse < 1.0) drop_pixels(s.sparse, keep_sparse, seed);
  s.normals = NormalMap(h, w);
  s.mixed = MaskGrid::Constant(h, w, false);
  return s;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("compute_metrics: perfect prediction scores zero everywhere") {
  const DepthMap gt = dense_map(6, 9, 3, 0.5f, 40.0f);
  const MetricReport m = compute_metrics(gt, gt);
  CHECK(m.n_pixels == 54);
  CHECK(m.rmse_mm == 0.0);
  CHECK(m.mae_mm == 0.0);
  CHECK(m.irmse_per_km == 0.0);
  CHECK(m.imae_per_km == 0.0);
  CHECK(m.rel == 0.0);
  CHECK(m.delta1 == 100.0);
  CHECK(m.delta2 == 100.0);
  CHECK(m.delta3 == 100.0);
}

TEST_CASE("compute_metrics: one pixel, 2 m predicted against 4 m truth") {
  DepthMap pred(1, 1), gt(1, 1);
  pred.values(0, 0) = 2.0f;
  pred.valid(0, 0) = true;
  gt.values(0, 0) = 4.0f;
  gt.valid(0, 0) = true;
  const MetricReport m = compute_metrics(pred, gt);
  CHECK(m.rmse_mm == doctest::Approx(2000.0).epsilon(1e-12));
  CHECK(m.mae_mm == doctest::Approx(2000.0).epsilon(1e-12));
  // 1/2 m - 1/4 m = 0.25 per meter = 250 per kilometer.
  CHECK(m.irmse_per_km == doctest::Approx(250.0).epsilon(1e-12));
  CHECK(m.imae_per_km == doctest::Approx(250.0).epsilon(1e-12));
  CHECK(m.rel == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.delta1 == 0.0);  // ratio 2 misses every threshold
  CHECK(m.delta2 == 0.0);
  CHECK(m.delta3 == 0.0);
  CHECK(m.n_pixels == 1);
}

TEST_CASE("compute_metrics: random pairs match the scalar-loop recomputation") {
  for (uint64_t seed : {1u, 8u, 21u}) {
    DepthMap pred = dense_map(8, 8, seed, 0.5f, 40.0f);
    DepthMap gt = dense_map(8, 8, seed + 100, 0.5f, 40.0f);
    drop_pixels(pred, 0.8, seed);
    drop_pixels(gt, 0.85, seed + 200);
    const MetricReport m = compute_metrics(pred, gt);
    match_scalar(m, scalar_metrics({&pred}, {&gt}));
  }
}

TEST_CASE("compute_metrics: doubling all depths doubles rmse and halves irmse") {
  DepthMap pred = dense_map(8, 8, 33, 0.5f, 40.0f);
  DepthMap gt = dense_map(8, 8, 34, 0.5f, 40.0f);
  const MetricReport base = compute_metrics(pred, gt);
  pred.values *= 2.0f;
  gt.values *= 2.0f;
  const MetricReport scaled = compute_metrics(pred, gt);
  // Scaling by a power of two is exact in both storage and the accumulators.
  CHECK(scaled.rmse_mm == doctest::Approx(2.0 * base.rmse_mm).epsilon(1e-14));
  CHECK(scaled.mae_mm == doctest::Approx(2.0 * base.mae_mm).epsilon(1e-14));
  CHECK(scaled.irmse_per_km == doctest::Approx(0.5 * base.irmse_per_km).epsilon(1e-14));
  CHECK(scaled.imae_per_km == doctest::Approx(0.5 * base.imae_per_km).epsilon(1e-14));
  CHECK(scaled.rel == doctest::Approx(base.rel).epsilon(1e-14));
  CHECK(scaled.delta1 == base.delta1);
  CHECK(scaled.delta2 == base.delta2);
  CHECK(scaled.delta3 == base.delta3);
}

TEST_CASE("compute_metrics: only jointly-valid pixels count") {
  DepthMap pred(2, 2), gt(2, 2);
  gt.values << 2, 3, 4, 5;
  gt.valid.setConstant(true);
  pred.values(0, 0) = 2.5f;
  pred.valid(0, 0) = true;
  pred.values(1, 1) = 5.0f;
  pred.valid(1, 1) = true;
  const MetricReport m = compute_metrics(pred, gt);
  CHECK(m.n_pixels == 2);
  CHECK(m.mae_mm == doctest::Approx(250.0).epsilon(1e-12));  // errors 0.5 and 0
  // 2.5/2 sits exactly on the first threshold, and the comparison is strict.
  CHECK(m.delta1 == 50.0);
  CHECK(m.delta2 == 100.0);
}

TEST_CASE("compute_metrics: deltas are ordered and everything is nonnegative") {
  for (uint64_t seed : {4u, 44u, 77u}) {
    DepthMap pred = dense_map(10, 10, seed, 0.5f, 20.0f);
    const DepthMap gt = dense_map(10, 10, seed + 9, 0.5f, 20.0f);
    drop_pixels(pred, 0.7, seed);
    const MetricReport m = compute_metrics(pred, gt);
    CHECK(m.rmse_mm >= 0);
    CHECK(m.mae_mm >= 0);
    CHECK(m.irmse_per_km >= 0);
    CHECK(m.imae_per_km >= 0);
    CHECK(m.rel >= 0);
    CHECK(m.delta1 <= m.delta2);
    CHECK(m.delta2 <= m.delta3);
    CHECK(m.delta3 <= 100.0);
    CHECK(m.rmse_mm >= m.mae_mm);  // quadratic mean dominates the arithmetic mean
  }
}

TEST_CASE("compute_metrics: disjoint validity and size mismatch fail loudly") {
  DepthMap pred(3, 3), gt(3, 3);
  pred.values(0, 0) = 1.0f;
  pred.valid(0, 0) = true;
  gt.values(2, 2) = 1.0f;
  gt.valid(2, 2) = true;
  CHECK_THROWS_WITH_AS(compute_metrics(pred, gt),
                       doctest::Contains("empty evaluation domain"), std::runtime_error);
  DepthMap small(2, 3);
  CHECK_THROWS_AS(compute_metrics(small, gt), std::invalid_argument);
}

TEST_CASE("evaluate_method: pools pixels across samples, not sample averages") {
  // Sample a: truth {2, 2}, prediction {3, 2}. Sample b: truth {5}, prediction
  // {3}. Pooled squared errors 1 + 0 + 4 over three pixels.
  Sample a = smooth_sample("a", 1, 2, 0, 1.0);
  a.dense.values << 2, 2;
  Sample b = smooth_sample("b", 1, 1, 0, 1.0);
  b.dense.values << 5;
  const CompletionFn method = [](const Sample& s) {
    DepthMap out = s.dense;
    if (s.id == "a") out.values(0, 0) = 3.0f;
    if (s.id == "b") out.values(0, 0) = 3.0f;
    return out;
  };
  const EvalResult res = evaluate_method({a, b}, method);
  REQUIRE(res.per_sample.size() == 2);
  CHECK(res.per_sample[0].first == "a");
  CHECK(res.per_sample[1].first == "b");
  CHECK(res.per_sample[0].second.rmse_mm ==
        doctest::Approx(1000.0 * std::sqrt(0.5)).epsilon(1e-12));
  CHECK(res.per_sample[1].second.rmse_mm == doctest::Approx(2000.0).epsilon(1e-12));
  CHECK(res.pooled.n_pixels == 3);
  CHECK(res.pooled.rmse_mm == doctest::Approx(1000.0 * std::sqrt(5.0 / 3.0)).epsilon(1e-12));
  const double mean_rmse =
      0.5 * (res.per_sample[0].second.rmse_mm + res.per_sample[1].second.rmse_mm);
  CHECK(std::abs(res.pooled.rmse_mm - mean_rmse) > 10.0);

  CHECK_THROWS_AS(evaluate_method({}, method), std::invalid_argument);
}

TEST_CASE("evaluate_method: pooled report matches a flat recomputation") {
  std::vector<Sample> samples = {smooth_sample("s0", 12, 20, 5, 0.3),
                                 smooth_sample("s1", 12, 20, 6, 0.2)};
  const CompletionFn method = [](const Sample& s) { return nearest_fill(s.sparse); };
  const EvalResult res = evaluate_method(samples, method);
  std::vector<DepthMap> preds;
  for (const Sample& s : samples) preds.push_back(method(s));
  match_scalar(res.pooled, scalar_metrics({&preds[0], &preds[1]},
                                          {&samples[0].dense, &samples[1].dense}));
  for (size_t i = 0; i < samples.size(); ++i) {
    const MetricReport direct = compute_metrics(preds[i], samples[i].dense);
    CHECK(res.per_sample[i].second.rmse_mm == doctest::Approx(direct.rmse_mm).epsilon(1e-12));
    CHECK(res.per_sample[i].second.n_pixels == direct.n_pixels);
  }
}

TEST_CASE("eval_csv: one row per sample plus a pooled row") {
  std::vector<Sample> samples = {smooth_sample("alpha", 8, 10, 2, 0.4),
                                 smooth_sample("beta", 8, 10, 3, 0.4)};
  const CompletionFn method = [](const Sample& s) { return nearest_fill(s.sparse); };
  const EvalResult res = evaluate_method(samples, method);
  const auto lines = lines_of(eval_csv(res));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "sample_id, rmse_mm, mae_mm, irmse, imae, rel, d1, d2, d3, n_px");
  CHECK(lines[1].rfind("alpha, ", 0) == 0);
  CHECK(lines[2].rfind("beta, ", 0) == 0);
  CHECK(lines[3].rfind("pooled, ", 0) == 0);
  double rmse = 0;
  long long n = 0;
  REQUIRE(std::sscanf(lines[3].c_str(), "pooled, %lf, %*f, %*f, %*f, %*f, %*f, %*f, %*f, %lld",
                      &rmse, &n) == 2);
  CHECK(rmse == doctest::Approx(res.pooled.rmse_mm).epsilon(1e-9));
  CHECK(n == res.pooled.n_pixels);
}

TEST_CASE("sparsity_sweep: five retention steps with binomial densities") {
  // Fully dense "sparse" inputs make the retention statistics sharp: each step
  // keeps Bernoulli(1/d) of 12288 pixels.
  std::vector<Sample> samples = {smooth_sample("s0", 48, 128, 11, 1.0),
                                 smooth_sample("s1", 48, 128, 12, 1.0)};
  const CompletionFn method = [](const Sample& s) { return nearest_fill(s.sparse); };
  const auto rows = sparsity_sweep(samples, method, 99);
  REQUIRE(rows.size() == 5);
  const int dens[5] = {1, 4, 16, 64, 256};
  const double total = 2.0 * 48 * 128;
  for (int i = 0; i < 5; ++i) {
    CHECK(rows[i].denominator == dens[i]);
    const double expect = total / dens[i];
    const double sigma = std::sqrt(total * (1.0 / dens[i]) * (1.0 - 1.0 / dens[i]));
    const double kept = rows[i].density_pct / 100.0 * total;
    CHECK(std::abs(kept - expect) <= 4.5 * sigma + 1e-9);
  }
  CHECK(rows[0].density_pct == 100.0);
  for (int i = 1; i < 5; ++i) CHECK(rows[i].density_pct < rows[i - 1].density_pct);
  // Full retention reproduces the truth exactly; heavy thinning cannot.
  CHECK(rows[0].metrics.rmse_mm == 0.0);
  CHECK(rows[4].metrics.rmse_mm > 0.0);
  CHECK_THROWS_AS(sparsity_sweep({}, method, 1), std::invalid_argument);
}

TEST_CASE("sparsity_sweep: samples thinned to nothing sit the ratio out") {
  // One sample keeps a single return, so heavy thinning usually erases it;
  // the other is dense and always survives. The sweep must finish regardless
  // and never report fewer pixels than the surviving sample contributes.
  Sample lone = smooth_sample("lone", 6, 6, 3, 1.0);
  lone.sparse = DepthMap(6, 6);
  lone.sparse.values(2, 2) = lone.dense.values(2, 2);
  lone.sparse.valid(2, 2) = true;
  const Sample full = smooth_sample("full", 48, 128, 4, 1.0);
  const CompletionFn method = [](const Sample& s) { return nearest_fill(s.sparse); };
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto rows = sparsity_sweep({lone, full}, method, seed);
    REQUIRE(rows.size() == 5);
    for (const SweepRow& row : rows) {
      CHECK(row.metrics.n_pixels >= 48 * 128);
      CHECK(row.metrics.n_pixels <= 48 * 128 + 6 * 6);
    }
  }
}

TEST_CASE("sparsity_sweep: identity step equals the plain evaluation") {
  std::vector<Sample> samples = {smooth_sample("s0", 16, 24, 21, 0.5),
                                 smooth_sample("s1", 16, 24, 22, 0.5)};
  const CompletionFn method = [](const Sample& s) { return nearest_fill(s.sparse); };
  const auto rows = sparsity_sweep(samples, method, 7);
  const EvalResult plain = evaluate_method(samples, method);
  CHECK(rows[0].metrics.rmse_mm == doctest::Approx(plain.pooled.rmse_mm).epsilon(1e-12));
  CHECK(rows[0].metrics.rel == doctest::Approx(plain.pooled.rel).epsilon(1e-12));
  CHECK(rows[0].metrics.n_pixels == plain.pooled.n_pixels);

  const auto lines = lines_of(sweep_csv(rows));
  REQUIRE(lines.size() == 6);
  CHECK(lines[0] == "ratio, density_pct, rmse_mm, mae_mm, irmse, imae, rel, d1, d2, d3, n_px");
  CHECK(lines[1].rfind("1, ", 0) == 0);
  CHECK(lines[2].rfind("0.25, ", 0) == 0);
  CHECK(lines[3].rfind("0.0625, ", 0) == 0);
  CHECK(lines[4].rfind("0.015625, ", 0) == 0);
  CHECK(lines[5].rfind("0.00390625, ", 0) == 0);
}

TEST_CASE("render_depth: turbo strip with black holes and clamped ends") {
  DepthMap d(2, 4);
  d.values(0, 0) = 1.0f;   // below range -> clamps to range.min
  d.values(0, 1) = 2.0f;   // exactly range.min
  d.values(0, 2) = 6.0f;   // midpoint
  d.values(0, 3) = 50.0f;  // above range -> clamps to range.max
  for (int c = 0; c < 4; ++c) d.valid(0, c) = true;
  // row 1 stays invalid
  const ImageU8 img = render_depth(d, DepthRange{2.0, 10.0});
  REQUIRE(img.width == 4);
  REQUIRE(img.height == 2);
  REQUIRE(img.channels == 3);
  for (int c = 0; c < 4; ++c)
    for (int ch = 0; ch < 3; ++ch) CHECK(img.at(1, c, ch) == 0);
  for (int ch = 0; ch < 3; ++ch) CHECK(img.at(0, 0, ch) == img.at(0, 1, ch));
  bool min_differs_mid = false, min_not_black = false;
  for (int ch = 0; ch < 3; ++ch) {
    min_differs_mid |= img.at(0, 1, ch) != img.at(0, 2, ch);
    min_not_black |= img.at(0, 1, ch) != 0;
  }
  CHECK(min_differs_mid);
  CHECK(min_not_black);

  DepthMap above(1, 1);
  above.values(0, 0) = 99.0f;
  above.valid(0, 0) = true;
  const ImageU8 capped = render_depth(above, DepthRange{2.0, 10.0});
  DepthMap at_max(1, 1);
  at_max.values(0, 0) = 10.0f;
  at_max.valid(0, 0) = true;
  const ImageU8 exact = render_depth(at_max, DepthRange{2.0, 10.0});
  for (int ch = 0; ch < 3; ++ch) CHECK(capped.at(0, 0, ch) == exact.at(0, 0, ch));

  CHECK_THROWS_AS(render_depth(d, DepthRange{5.0, 5.0}), std::invalid_argument);
  CHECK_THROWS_AS(render_depth(d, DepthRange{8.0, 2.0}), std::invalid_argument);
}
