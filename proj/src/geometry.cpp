#include "normfill/geometry.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace normfill {

void validate_rotation(const RigidTransform& T) {
  const Eigen::Matrix3d delta = T.rotation.transpose() * T.rotation - Eigen::Matrix3d::Identity();
  if (delta.cwiseAbs().maxCoeff() > 1e-9)
    throw std::invalid_argument("rigid transform: rotation is not orthonormal");
  if (std::abs(T.rotation.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("rigid transform: rotation determinant is not +1");
}

void validate_depth_map(const DepthMap& d, double z_max) {
  if (d.values.rows() != d.valid.rows() || d.values.cols() != d.valid.cols())
    throw std::invalid_argument("depth map: values/valid size mismatch");
  for (int r = 0; r < d.height(); ++r)
    for (int c = 0; c < d.width(); ++c) {
      const float v = d.values(r, c);
      if (d.valid(r, c)) {
        if (!std::isfinite(v) || v <= 0.0f || v > float(z_max))
          throw std::invalid_argument("depth map: valid entry outside (0, z_max]");
      } else if (v != 0.0f) {
        throw std::invalid_argument("depth map: invalid entry must store 0");
      }
    }
}

Eigen::Vector3d unproject(double u, double v, double depth, const CameraIntrinsics& K) {
  if (!(depth > 0.0)) throw std::invalid_argument("unproject: depth must be positive");
  return pixel_ray(u, v, K) * depth;
}

PixelProjection project(const Eigen::Vector3d& p, const CameraIntrinsics& K) {
  if (!(p.z() > 0.0)) throw std::invalid_argument("project: point must be in front of the camera");
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy, p.z()};
}

namespace {

// Nearest pixel for a projected point, or nullopt when off-frame.
std::optional<std::pair<int, int>> to_pixel(const PixelProjection& q, const CameraIntrinsics& K) {
  const long c = std::lround(q.u);
  const long r = std::lround(q.v);
  if (r < 0 || r >= K.height || c < 0 || c >= K.width) return std::nullopt;
  return std::make_pair(int(r), int(c));
}

}  // namespace

DepthMap rasterize_zbuffer(std::span<const Eigen::Vector3d> points, const CameraIntrinsics& K,
                           double z_max) {
  DepthMap out(K.height, K.width);
  for (const auto& p : points) {
    if (!(p.z() > 0.0) || p.z() > z_max) continue;
    const auto pix = to_pixel(project(p, K), K);
    if (!pix) continue;
    auto [r, c] = *pix;
    if (!out.valid(r, c) || float(p.z()) < out.values(r, c)) {
      out.values(r, c) = float(p.z());
      out.valid(r, c) = true;
    }
  }
  return out;
}

WarpResult warp_lidar_to_camera(std::span<const Eigen::Vector3d> points_sensor,
                                const RigidTransform& sensor_to_camera,
                                const CameraIntrinsics& K, double tau) {
  validate_rotation(sensor_to_camera);
  std::vector<Eigen::Vector3d> cam;
  cam.reserve(points_sensor.size());
  for (const auto& p : points_sensor) cam.push_back(sensor_to_camera.apply(p));

  WarpResult out;
  out.sparse = DepthMap(K.height, K.width);
  out.mixed = MaskGrid::Constant(K.height, K.width, false);
  for (const auto& p : cam) {
    if (!(p.z() > 0.0) || p.z() > kZMax) continue;
    const auto pix = to_pixel(project(p, K), K);
    if (!pix) continue;
    auto [r, c] = *pix;
    out.sparse.values(r, c) = float(p.z());
    out.sparse.valid(r, c) = true;
  }

  const DepthMap zbuf = rasterize_zbuffer(cam, K);
  for (int r = 0; r < K.height; ++r)
    for (int c = 0; c < K.width; ++c)
      if (out.sparse.valid(r, c) && zbuf.valid(r, c))
        out.mixed(r, c) = double(out.sparse.values(r, c)) - double(zbuf.values(r, c)) > tau;
  return out;
}

NormalMap fit_plane_normals(const DepthMap& depth, const CameraIntrinsics& K, int window) {
  if (window < 3 || window % 2 == 0)
    throw std::invalid_argument("fit_plane_normals: window must be odd and >= 3");
  const int H = depth.height(), W = depth.width();
  const int rad = window / 2;
  NormalMap out(H, W);
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(size_t(window) * window);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (!depth.valid(r, c)) continue;
      pts.clear();
      for (int dr = -rad; dr <= rad; ++dr)
        for (int dc = -rad; dc <= rad; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W || !depth.valid(rr, cc)) continue;
          pts.push_back(unproject(cc, rr, depth.values(rr, cc), K));
        }
      if (pts.size() < 3) continue;
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      for (const auto& p : pts) mean += p;
      mean /= double(pts.size());
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (const auto& p : pts) {
        const Eigen::Vector3d d = p - mean;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
      if (eig.info() != Eigen::Success) continue;
      Eigen::Vector3d n = eig.eigenvectors().col(0);  // eigenvalues ascending
      const double len = n.norm();
      if (!(len > 1e-12)) continue;
      n /= len;
      if (n.dot(pixel_ray(c, r, K)) > 0.0) n = -n;
      out.nx(r, c) = float(n.x());
      out.ny(r, c) = float(n.y());
      out.nz(r, c) = float(n.z());
      out.valid(r, c) = true;
    }
  return out;
}

NormalMap normals_from_depth(const DepthMap& depth, const CameraIntrinsics& K) {
  const int H = depth.height(), W = depth.width();
  NormalMap out(H, W);
  auto point = [&](int r, int c) { return unproject(c, r, depth.values(r, c), K); };
  for (int r = 1; r + 1 < H; ++r)
    for (int c = 1; c + 1 < W; ++c) {
      if (!depth.valid(r, c) || !depth.valid(r, c - 1) || !depth.valid(r, c + 1) ||
          !depth.valid(r - 1, c) || !depth.valid(r + 1, c))
        continue;
      const Eigen::Vector3d tu = point(r, c + 1) - point(r, c - 1);
      const Eigen::Vector3d tv = point(r + 1, c) - point(r - 1, c);
      Eigen::Vector3d n = tv.cross(tu);
      const double len = n.norm();
      if (!(len > 1e-12)) continue;
      n /= len;
      if (n.z() > 1e-6) continue;  // a discontinuity flipped the surface away
      out.nx(r, c) = float(n.x());
      out.ny(r, c) = float(n.y());
      out.nz(r, c) = float(n.z());
      out.valid(r, c) = true;
    }
  return out;
}

double normal_depth_sensitivity(double z, const Eigen::Vector3d& normal, double perturb_deg,
                                int pixel_offset, const CameraIntrinsics& K) {
  if (!(z > 0.0)) throw std::invalid_argument("normal_depth_sensitivity: z must be positive");
  const double nlen = normal.norm();
  if (!(nlen > 1e-12)) throw std::invalid_argument("normal_depth_sensitivity: zero normal");
  const Eigen::Vector3d n = normal / nlen;

  const double inf = std::numeric_limits<double>::infinity();
  const Eigen::Vector3d d_ref = pixel_ray(K.cx, K.cy + pixel_offset, K);
  const Eigen::Vector3d d_probe = pixel_ray(K.cx, K.cy + pixel_offset + 1, K);
  const Eigen::Vector3d p0 = d_ref * z;

  auto plane_depth = [&](const Eigen::Vector3d& nn) {
    const double denom = nn.dot(d_probe);
    if (std::abs(denom) < 1e-12) return inf;
    return nn.dot(p0) / denom;  // ray z component is 1, so t is the depth
  };
  const double base = plane_depth(n);
  if (!std::isfinite(base)) return inf;

  Eigen::Vector3d e1 = n.cross(Eigen::Vector3d::UnitZ());
  if (e1.norm() < 1e-6) e1 = n.cross(Eigen::Vector3d::UnitX());
  e1.normalize();
  const Eigen::Vector3d e2 = n.cross(e1);

  const double alpha = perturb_deg * M_PI / 180.0;
  double worst = 0.0;
  const int steps = 720;
  for (int i = 0; i < steps; ++i) {
    const double phi = 2.0 * M_PI * i / steps;
    const Eigen::Vector3d tilted =
        std::cos(alpha) * n + std::sin(alpha) * (std::cos(phi) * e1 + std::sin(phi) * e2);
    const double d = plane_depth(tilted);
    if (!std::isfinite(d)) return inf;
    worst = std::max(worst, std::abs(d - base));
  }
  return worst;
}

}  // namespace normfill
