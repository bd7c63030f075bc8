#pragma once

#include "normfill/geometry.hpp"
#include "normfill/synthdata.hpp"

namespace normfill {

/// Every invalid pixel takes the depth of the closest valid pixel by
/// Euclidean pixel distance; distance ties go to the smaller row, then the
/// smaller column. Throws when the input has no valid pixel.
DepthMap nearest_fill(const DepthMap& sparse);

struct BilateralParams {
  double sigma_spatial = 4.0;  // pixels
  double sigma_color = 0.1;    // rgb intensity units
  int radius = 7;
  int max_iters = 10;
};

/// Iterative bilateral hole filling guided by the rgb image: each hole takes
/// the spatially and photometrically weighted average of valid depths in its
/// window, newly filled pixels counting as valid from the next iteration on.
/// Holes still open after max_iters fall back to nearest_fill. Valid input
/// pixels pass through untouched.
DepthMap bilateral_fill(const DepthMap& sparse, const Eigen::ArrayXXf& red,
                        const Eigen::ArrayXXf& green, const Eigen::ArrayXXf& blue,
                        const BilateralParams& params = {});

inline DepthMap bilateral_fill(const Sample& s, const BilateralParams& params = {}) {
  return bilateral_fill(s.sparse, s.red, s.green, s.blue, params);
}

}  // namespace normfill
