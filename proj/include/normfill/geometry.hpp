#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "normfill/tensor.hpp"

namespace normfill {

// Camera frame: x right, y down, z forward (optical axis). Pixel (row, col)
// has center (u, v) = (col, row). Depth is the camera-frame z coordinate.

inline constexpr double kZMax = 100.0;
inline constexpr double kMixThreshold = 1.0;  // meters, occlusion mixing tau

struct CameraIntrinsics {
  double fx = 100.0, fy = 100.0;
  double cx = 96.0, cy = 32.0;
  int width = 192, height = 64;
};

inline CameraIntrinsics desk_camera() { return CameraIntrinsics{}; }

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
};

/// Throws unless rotation is orthonormal with determinant +1 (within 1e-9).
void validate_rotation(const RigidTransform& T);

using MaskGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Dense or sparse depth raster. values(r, c) is 0 exactly where invalid.
struct DepthMap {
  Eigen::ArrayXXf values;
  MaskGrid valid;

  DepthMap() = default;
  DepthMap(int height, int width)
      : values(Eigen::ArrayXXf::Zero(height, width)),
        valid(MaskGrid::Constant(height, width, false)) {}

  int height() const { return int(values.rows()); }
  int width() const { return int(values.cols()); }
  int64_t valid_count() const { return valid.count(); }
};

/// Throws if any valid entry is outside (0, z_max] or any invalid entry is
/// nonzero.
void validate_depth_map(const DepthMap& d, double z_max = kZMax);

/// Unit, camera-facing normals per pixel.
struct NormalMap {
  Eigen::ArrayXXf nx, ny, nz;
  MaskGrid valid;

  NormalMap() = default;
  NormalMap(int height, int width)
      : nx(Eigen::ArrayXXf::Zero(height, width)),
        ny(Eigen::ArrayXXf::Zero(height, width)),
        nz(Eigen::ArrayXXf::Zero(height, width)),
        valid(MaskGrid::Constant(height, width, false)) {}

  int height() const { return int(nx.rows()); }
  int width() const { return int(nx.cols()); }
};

/// Camera ray through pixel coordinate (u, v), z component 1.
inline Eigen::Vector3d pixel_ray(double u, double v, const CameraIntrinsics& K) {
  return {(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0};
}

Eigen::Vector3d unproject(double u, double v, double depth, const CameraIntrinsics& K);

struct PixelProjection {
  double u, v, depth;
};
/// Requires p.z > 0.
PixelProjection project(const Eigen::Vector3d& p, const CameraIntrinsics& K);

/// Nearest-depth-wins rendering of camera-frame points onto the pixel grid.
/// Points behind the camera, outside the frame, or beyond z_max are dropped.
DepthMap rasterize_zbuffer(std::span<const Eigen::Vector3d> points, const CameraIntrinsics& K,
                           double z_max = kZMax);

struct WarpResult {
  DepthMap sparse;
  MaskGrid mixed;
};

/// Projects sensor-frame points through T (sensor to camera) in input order
/// with last write winning per pixel. A pixel is flagged mixed when the kept
/// depth exceeds the z-buffer depth of the same point set by more than tau:
/// the sensor saw past an edge that occludes the pixel from the camera.
WarpResult warp_lidar_to_camera(std::span<const Eigen::Vector3d> points_sensor,
                                const RigidTransform& sensor_to_camera,
                                const CameraIntrinsics& K, double tau = kMixThreshold);

/// Least-squares plane fit over valid depths in a (window x window)
/// neighborhood; the normal is the smallest-eigenvalue direction of the
/// centered covariance, flipped to face the camera. Needs at least three
/// valid neighbors.
NormalMap fit_plane_normals(const DepthMap& depth, const CameraIntrinsics& K, int window = 5);

/// Normals from central differences of unprojected points. A pixel is valid
/// when it and its four cross neighbors are valid, the tangent cross product
/// is nondegenerate, and the result faces the camera.
NormalMap normals_from_depth(const DepthMap& depth, const CameraIntrinsics& K);

/// Worst-case neighbor-pixel depth error caused by tilting a plane normal.
/// The plane passes through the point at depth z seen by the pixel
/// pixel_offset rows below the principal point; the depth is re-derived one
/// row further down. Sweeps tilt azimuths and returns the largest absolute
/// deviation, +infinity if any tilted plane runs parallel to the probe ray.
double normal_depth_sensitivity(double z, const Eigen::Vector3d& normal, double perturb_deg,
                                int pixel_offset, const CameraIntrinsics& K);

// ---- differentiable twin ----

/// (u - cx)/fx and (v - cy)/fy grids as constant tensors, [B,1,H,W].
template <typename S>
std::pair<Tensor<S>, Tensor<S>> pixel_ray_grids(const CameraIntrinsics& K, int batch) {
  const int H = K.height, W = K.width;
  std::vector<S> xs(size_t(batch) * H * W), ys(size_t(batch) * H * W);
  for (int b = 0; b < batch; ++b)
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const size_t i = (size_t(b) * H + r) * W + c;
        xs[i] = S((c - K.cx) / K.fx);
        ys[i] = S((r - K.cy) / K.fy);
      }
  return {Tensor<S>::from_data({batch, 1, H, W}, std::move(xs)),
          Tensor<S>::from_data({batch, 1, H, W}, std::move(ys))};
}

/// Differentiable version of normals_from_depth. Input is metric depth
/// [B,1,H,W]; output is the raw (unnormalized) camera-facing normal field
/// [B,3,H,W] from the same central-difference tangents. Validity handling is
/// the caller's job via masks from the non-differentiable version.
template <typename S>
Tensor<S> normals_from_depth_t(const Tensor<S>& depth, const CameraIntrinsics& K) {
  detail::require(depth.ndim() == 4 && depth.dim(1) == 1,
                  "normals_from_depth_t: depth must be [B,1,H,W]");
  detail::require(depth.dim(2) == K.height && depth.dim(3) == K.width,
                  "normals_from_depth_t: depth does not match camera size");
  auto [xg, yg] = pixel_ray_grids<S>(K, depth.dim(0));
  Tensor<S> px = mul(depth, xg);
  Tensor<S> py = mul(depth, yg);
  const Tensor<S>& pz = depth;

  auto diff_u = [](const Tensor<S>& t) { return sub(neighbor(t, 0, 1), neighbor(t, 0, -1)); };
  auto diff_v = [](const Tensor<S>& t) { return sub(neighbor(t, 1, 0), neighbor(t, -1, 0)); };
  Tensor<S> tux = diff_u(px), tuy = diff_u(py), tuz = diff_u(pz);
  Tensor<S> tvx = diff_v(px), tvy = diff_v(py), tvz = diff_v(pz);

  // n = tv x tu faces the camera for graph surfaces z(u, v)
  Tensor<S> nx = sub(mul(tvy, tuz), mul(tvz, tuy));
  Tensor<S> ny = sub(mul(tvz, tux), mul(tvx, tuz));
  Tensor<S> nz = sub(mul(tvx, tuy), mul(tvy, tux));
  return concat_channels(concat_channels(nx, ny), nz);
}

}  // namespace normfill
