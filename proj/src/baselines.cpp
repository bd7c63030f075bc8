#include "normfill/baselines.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace normfill {

DepthMap nearest_fill(const DepthMap& sparse) {
  const int H = sparse.height(), W = sparse.width();
  struct Px {
    int r, c;
    float v;
  };
  std::vector<Px> valid;
  valid.reserve(size_t(sparse.valid_count()));
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (sparse.valid(r, c)) valid.push_back({r, c, sparse.values(r, c)});
  if (valid.empty()) throw std::invalid_argument("nearest_fill: input has no valid pixels");

  DepthMap out = sparse;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (sparse.valid(r, c)) continue;
      // Valid pixels are scanned in row-major order, so keeping the first
      // strict minimum resolves ties toward smaller row then smaller column.
      int64_t best = -1;
      float best_v = 0;
      for (const Px& p : valid) {
        const int64_t dr = p.r - r, dc = p.c - c;
        const int64_t d2 = dr * dr + dc * dc;
        if (best < 0 || d2 < best) {
          best = d2;
          best_v = p.v;
        }
      }
      out.values(r, c) = best_v;
      out.valid(r, c) = true;
    }
  return out;
}

DepthMap bilateral_fill(const DepthMap& sparse, const Eigen::ArrayXXf& red,
                        const Eigen::ArrayXXf& green, const Eigen::ArrayXXf& blue,
                        const BilateralParams& params) {
  const int H = sparse.height(), W = sparse.width();
  if (int(red.rows()) != H || int(red.cols()) != W || int(green.rows()) != H ||
      int(green.cols()) != W || int(blue.rows()) != H || int(blue.cols()) != W)
    throw std::invalid_argument("bilateral_fill: rgb size does not match depth");
  if (params.sigma_spatial <= 0 || params.sigma_color <= 0 || params.radius < 1 ||
      params.max_iters < 0)
    throw std::invalid_argument("bilateral_fill: invalid parameters");
  if (sparse.valid_count() == 0)
    throw std::invalid_argument("bilateral_fill: input has no valid pixels");

  const int R = params.radius;
  std::vector<double> spatial(size_t(2 * R + 1) * (2 * R + 1));
  const double inv2ss = 1.0 / (2.0 * params.sigma_spatial * params.sigma_spatial);
  for (int dr = -R; dr <= R; ++dr)
    for (int dc = -R; dc <= R; ++dc)
      spatial[size_t(dr + R) * (2 * R + 1) + size_t(dc + R)] =
          std::exp(-(double(dr) * dr + double(dc) * dc) * inv2ss);
  const double inv2sc = 1.0 / (2.0 * params.sigma_color * params.sigma_color);

  DepthMap cur = sparse;
  for (int iter = 0; iter < params.max_iters; ++iter) {
    int64_t holes = (H * int64_t(W)) - cur.valid_count();
    if (holes == 0) break;
    DepthMap next = cur;
    int64_t filled = 0;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        if (cur.valid(r, c)) continue;
        double wsum = 0, vsum = 0;
        const int r0 = std::max(0, r - R), r1 = std::min(H - 1, r + R);
        const int c0 = std::max(0, c - R), c1 = std::min(W - 1, c + R);
        for (int rr = r0; rr <= r1; ++rr)
          for (int cc = c0; cc <= c1; ++cc) {
            if (!cur.valid(rr, cc)) continue;
            const double er = double(red(rr, cc)) - double(red(r, c));
            const double eg = double(green(rr, cc)) - double(green(r, c));
            const double eb = double(blue(rr, cc)) - double(blue(r, c));
            const double w = spatial[size_t(rr - r + R) * (2 * R + 1) + size_t(cc - c + R)] *
                             std::exp(-(er * er + eg * eg + eb * eb) * inv2sc);
            wsum += w;
            vsum += w * double(cur.values(rr, cc));
          }
        if (wsum > 0) {
          next.values(r, c) = float(vsum / wsum);
          next.valid(r, c) = true;
          ++filled;
        }
      }
    cur = std::move(next);
    if (filled == 0) break;
  }
  if (cur.valid_count() < int64_t(H) * W) cur = nearest_fill(cur);
  return cur;
}

}  // namespace normfill
