#include "normfill/synthdata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "normfill/image_io.hpp"
#include "normfill/util.hpp"

namespace normfill {

namespace {

constexpr double kTMin = 1e-6;

Eigen::Matrix3d yaw_rotation(double yaw) {
  Eigen::Matrix3d R;
  const double c = std::cos(yaw), s = std::sin(yaw);
  R << c, 0, s, 0, 1, 0, -s, 0, c;
  return R;
}

std::optional<RayHit> hit_ground(const GroundPlane& g, const Eigen::Vector3d& o,
                                 const Eigen::Vector3d& d) {
  if (d.y() <= 1e-12) return std::nullopt;
  const double t = (g.height - o.y()) / d.y();
  if (t <= kTMin) return std::nullopt;
  return RayHit{t, {0.0, -1.0, 0.0}, g.albedo};
}

std::optional<RayHit> hit_box(const Box& box, const Eigen::Vector3d& o,
                              const Eigen::Vector3d& d) {
  const Eigen::Matrix3d R = yaw_rotation(box.yaw);
  const Eigen::Vector3d ol = R.transpose() * (o - box.center);
  const Eigen::Vector3d dl = R.transpose() * d;
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double e = box.half_extents[i];
    if (std::abs(dl[i]) < 1e-12) {
      if (std::abs(ol[i]) > e) return std::nullopt;
      continue;
    }
    double t1 = (-e - ol[i]) / dl[i];
    double t2 = (e - ol[i]) / dl[i];
    double s = dl[i] > 0 ? -1.0 : 1.0;
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > tmin) {
      tmin = t1;
      axis = i;
      sign = s;
    }
    tmax = std::min(tmax, t2);
  }
  if (tmin > tmax || tmin <= kTMin || axis < 0) return std::nullopt;
  Eigen::Vector3d nl = Eigen::Vector3d::Zero();
  nl[axis] = sign;
  return RayHit{tmin, R * nl, box.albedo};
}

std::optional<RayHit> hit_cylinder(const Cylinder& cyl, const Eigen::Vector3d& o,
                                   const Eigen::Vector3d& d) {
  std::optional<RayHit> best;
  const double ox = o.x() - cyl.x, oz = o.z() - cyl.z;
  const double a = d.x() * d.x() + d.z() * d.z();
  if (a > 1e-14) {
    const double b = 2.0 * (ox * d.x() + oz * d.z());
    const double c = ox * ox + oz * oz - cyl.radius * cyl.radius;
    const double disc = b * b - 4 * a * c;
    if (disc >= 0) {
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
        if (t <= kTMin) continue;
        const double y = o.y() + t * d.y();
        if (y < cyl.y_top || y > cyl.y_bottom) continue;
        Eigen::Vector3d n{(o.x() + t * d.x() - cyl.x) / cyl.radius, 0.0,
                          (o.z() + t * d.z() - cyl.z) / cyl.radius};
        if (!best || t < best->t) best = RayHit{t, n, cyl.albedo};
        break;  // nearer root first, the far side is self-occluded
      }
    }
  }
  if (std::abs(d.y()) > 1e-12) {
    const double t = (cyl.y_top - o.y()) / d.y();
    if (t > kTMin && (!best || t < best->t)) {
      const double px = o.x() + t * d.x() - cyl.x;
      const double pz = o.z() + t * d.z() - cyl.z;
      if (px * px + pz * pz <= cyl.radius * cyl.radius)
        best = RayHit{t, {0.0, -1.0, 0.0}, cyl.albedo};
    }
  }
  return best;
}

}  // namespace

std::optional<RayHit> raycast(const Scene& scene, const Eigen::Vector3d& origin,
                              const Eigen::Vector3d& dir) {
  std::optional<RayHit> best = hit_ground(scene.ground, origin, dir);
  auto consider = [&](const std::optional<RayHit>& h) {
    if (h && (!best || h->t < best->t)) best = h;
  };
  for (const auto& b : scene.boxes) consider(hit_box(b, origin, dir));
  for (const auto& c : scene.cylinders) consider(hit_cylinder(c, origin, dir));
  return best;
}

Scene build_scene(uint64_t seed, Difficulty difficulty) {
  auto rng = make_rng(seed, 0);
  auto uni = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  Scene scene;
  const double gray = uni(0.3, 0.45);
  scene.ground.albedo = {gray, gray, gray + uni(0.0, 0.05)};
  const double sun_az = uni(0.0, 2.0 * M_PI);
  const double sun_el = uni(35.0, 65.0) * M_PI / 180.0;
  scene.sun_dir = {std::cos(sun_el) * std::sin(sun_az), -std::sin(sun_el),
                   std::cos(sun_el) * std::cos(sun_az)};
  scene.sky_color = {uni(0.52, 0.68), uni(0.62, 0.78), uni(0.82, 0.92)};

  const int lo = difficulty == Difficulty::easy ? 3 : 10;
  const int hi = difficulty == Difficulty::easy ? 5 : 20;
  const int count = int(std::uniform_int_distribution<int>(lo, hi)(rng));

  // A few pieces of near-field street furniture first. Nearby occluders widen
  // the sensor-to-camera parallax band to several pixels, which is what makes
  // occlusion-mixed returns appear at desk-scale resolution at all.
  const int near_count = std::min(count, difficulty == Difficulty::easy ? 1 : 3);
  for (int i = 0; i < near_count; ++i) {
    const double z = uni(2.5, 7.0);
    const double x = uni(-0.55, 0.55) * z;
    if (uni(0.0, 1.0) < 0.5) {
      Box b;
      b.half_extents = {uni(0.15, 0.8), uni(0.4, 1.2), uni(0.15, 0.8)};
      b.center = {x, scene.ground.height - b.half_extents.y(), z};
      b.yaw = uni(-0.5, 0.5);
      b.albedo = {uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)};
      scene.boxes.push_back(b);
    } else {
      Cylinder c;
      c.radius = uni(0.08, 0.3);
      c.x = x;
      c.z = z;
      c.y_bottom = scene.ground.height;
      c.y_top = scene.ground.height - uni(2.0, 4.5);
      c.albedo = {uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)};
      scene.cylinders.push_back(c);
    }
  }

  for (int i = near_count; i < count; ++i) {
    if (uni(0.0, 1.0) < 0.75) {
      Box b;
      b.half_extents = {uni(0.5, 4.0), uni(0.5, 4.0), uni(0.5, 4.0)};
      b.center = {uni(-20.0, 20.0), scene.ground.height - b.half_extents.y(), uni(8.0, 55.0)};
      b.yaw = uni(-0.5, 0.5);
      b.albedo = {uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)};
      scene.boxes.push_back(b);
    } else {
      Cylinder c;
      c.radius = uni(0.08, 0.35);
      c.x = uni(-15.0, 15.0);
      c.z = uni(6.0, 45.0);
      c.y_bottom = scene.ground.height;
      c.y_top = scene.ground.height - uni(2.5, 6.0);
      c.albedo = {uni(0.1, 0.9), uni(0.1, 0.9), uni(0.1, 0.9)};
      scene.cylinders.push_back(c);
    }
  }
  return scene;
}

LidarPattern LidarPattern::desk_default() {
  LidarPattern p;
  p.sensor_to_camera.translation = {0.3, -0.2, 0.0};
  return p;
}

Sample raycast_sample(const Scene& scene, const CameraIntrinsics& K, const LidarPattern& lidar) {
  validate_rotation(lidar.sensor_to_camera);
  const int H = K.height, W = K.width;
  Sample s;
  s.red = s.green = s.blue = Eigen::ArrayXXf::Zero(H, W);
  s.dense = DepthMap(H, W);
  s.normals = NormalMap(H, W);

  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const Eigen::Vector3d dir = pixel_ray(c, r, K);  // z component 1, t is depth
      const auto hit = raycast(scene, Eigen::Vector3d::Zero(), dir);
      Eigen::Vector3d rgb = scene.sky_color;
      if (hit) {
        const double lit = std::max(0.0, hit->normal.dot(scene.sun_dir));
        rgb = hit->albedo * lit + Eigen::Vector3d::Constant(0.2);
        if (hit->t <= kZMax) {
          s.dense.values(r, c) = float(hit->t);
          s.dense.valid(r, c) = true;
          Eigen::Vector3d n = hit->normal;
          if (n.dot(dir) > 0.0) n = -n;  // grazing numeric flip only
          s.normals.nx(r, c) = float(n.x());
          s.normals.ny(r, c) = float(n.y());
          s.normals.nz(r, c) = float(n.z());
          s.normals.valid(r, c) = true;
        }
      }
      s.red(r, c) = float(std::clamp(rgb.x(), 0.0, 1.0));
      s.green(r, c) = float(std::clamp(rgb.y(), 0.0, 1.0));
      s.blue(r, c) = float(std::clamp(rgb.z(), 0.0, 1.0));
    }

  std::vector<Eigen::Vector3d> pts_sensor;
  const Eigen::Vector3d origin = lidar.sensor_to_camera.translation;
  const Eigen::Matrix3d& R = lidar.sensor_to_camera.rotation;
  for (int b = 0; b < lidar.beams; ++b) {
    const double e = (lidar.elev_min_deg +
                      (lidar.elev_max_deg - lidar.elev_min_deg) * b /
                          std::max(1, lidar.beams - 1)) *
                     M_PI / 180.0;
    const double phase =
        lidar.stagger_azimuth ? lidar.azimuth_step_deg * b / lidar.beams : 0.0;
    for (double a_deg = lidar.azimuth_min_deg + phase;
         a_deg <= lidar.azimuth_max_deg + 1e-9; a_deg += lidar.azimuth_step_deg) {
      const double a = a_deg * M_PI / 180.0;
      const Eigen::Vector3d d_sensor{std::cos(e) * std::sin(a), -std::sin(e),
                                     std::cos(e) * std::cos(a)};
      const auto hit = raycast(scene, origin, R * d_sensor);  // unit dir, t is range
      if (!hit || hit->t > lidar.max_range) continue;
      const Eigen::Vector3d p_world = origin + hit->t * (R * d_sensor);
      pts_sensor.push_back(R.transpose() * (p_world - origin));
    }
  }
  WarpResult warp = warp_lidar_to_camera(pts_sensor, lidar.sensor_to_camera, K);
  s.sparse = std::move(warp.sparse);
  s.mixed = std::move(warp.mixed);
  return s;
}

DepthMap subsample_depth(const DepthMap& d, int denominator, uint64_t seed) {
  if (denominator != 1 && denominator != 4 && denominator != 16 && denominator != 64 &&
      denominator != 256)
    throw std::invalid_argument("subsample: denominator must be 1, 4, 16, 64 or 256");
  if (denominator == 1) return d;
  auto rng = make_rng(seed, 1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double keep = 1.0 / denominator;
  DepthMap out(d.height(), d.width());
  for (int r = 0; r < d.height(); ++r)
    for (int c = 0; c < d.width(); ++c) {
      if (!d.valid(r, c)) continue;
      if (uni(rng) < keep) {
        out.values(r, c) = d.values(r, c);
        out.valid(r, c) = true;
      }
    }
  return out;
}

Sample subsample_sparse(const Sample& s, int denominator, uint64_t seed) {
  Sample out = s;
  out.sparse = subsample_depth(s.sparse, denominator, seed);
  out.mixed = s.mixed && out.sparse.valid;  // dropped returns cannot poison anything
  return out;
}

uint16_t encode_depth_png(float meters) {
  if (meters <= 0.0f) return 0;
  const long v = std::lround(double(meters) * 256.0);
  return uint16_t(std::clamp(v, 1l, 65535l));
}

float decode_depth_png(uint16_t value) { return float(value) / 256.0f; }

void write_sample(const std::filesystem::path& dir, const Sample& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int H = s.height(), W = s.width();

  ImageU8 rgb;
  rgb.width = W;
  rgb.height = H;
  rgb.channels = 3;
  rgb.pixels.resize(size_t(W) * H * 3);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      rgb.at(r, c, 0) = uint8_t(std::lround(s.red(r, c) * 255.0f));
      rgb.at(r, c, 1) = uint8_t(std::lround(s.green(r, c) * 255.0f));
      rgb.at(r, c, 2) = uint8_t(std::lround(s.blue(r, c) * 255.0f));
    }
  write_png(dir / "rgb.png", rgb);

  auto write_depth = [&](const fs::path& p, const DepthMap& d) {
    ImageU16 img;
    img.width = W;
    img.height = H;
    img.channels = 1;
    img.pixels.resize(size_t(W) * H);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        img.at(r, c) = d.valid(r, c) ? encode_depth_png(d.values(r, c)) : 0;
    write_png(p, img);
  };
  write_depth(dir / "sparse.png", s.sparse);
  write_depth(dir / "dense.png", s.dense);

  ImageU16 nrm;
  nrm.width = W;
  nrm.height = H;
  nrm.channels = 3;
  nrm.pixels.resize(size_t(W) * H * 3);
  auto enc = [](float v) { return uint16_t(std::lround((double(v) + 1.0) / 2.0 * 65535.0)); };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (s.normals.valid(r, c)) {
        nrm.at(r, c, 0) = enc(s.normals.nx(r, c));
        nrm.at(r, c, 1) = enc(s.normals.ny(r, c));
        nrm.at(r, c, 2) = enc(s.normals.nz(r, c));
      } else {
        nrm.at(r, c, 0) = nrm.at(r, c, 1) = nrm.at(r, c, 2) = 0;  // never a unit vector
      }
    }
  write_png(dir / "normals.png", nrm);

  ImageU8 mix;
  mix.width = W;
  mix.height = H;
  mix.channels = 1;
  mix.pixels.resize(size_t(W) * H);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) mix.at(r, c) = s.mixed(r, c) ? 255 : 0;
  write_png(dir / "mixed.png", mix);
}

Sample read_sample(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Sample s;
  const ImageU8 rgb = read_png_u8(dir / "rgb.png");
  if (rgb.channels != 3) throw std::runtime_error("rgb.png must have 3 channels: " + dir.string());
  const int H = rgb.height, W = rgb.width;
  s.red.resize(H, W);
  s.green.resize(H, W);
  s.blue.resize(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      s.red(r, c) = rgb.at(r, c, 0) / 255.0f;
      s.green(r, c) = rgb.at(r, c, 1) / 255.0f;
      s.blue(r, c) = rgb.at(r, c, 2) / 255.0f;
    }

  auto read_depth = [&](const fs::path& p) {
    const ImageU16 img = read_png_u16(p);
    if (img.channels != 1 || img.width != W || img.height != H)
      throw std::runtime_error("bad depth png: " + p.string());
    DepthMap d(H, W);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const uint16_t v = img.at(r, c);
        if (v > 0) {
          d.values(r, c) = decode_depth_png(v);
          d.valid(r, c) = true;
        }
      }
    return d;
  };
  s.sparse = read_depth(dir / "sparse.png");
  s.dense = read_depth(dir / "dense.png");

  s.normals = NormalMap(H, W);
  if (fs::exists(dir / "normals.png")) {
    const ImageU16 nrm = read_png_u16(dir / "normals.png");
    if (nrm.channels != 3 || nrm.width != W || nrm.height != H)
      throw std::runtime_error("bad normals png: " + dir.string());
    auto dec = [](uint16_t v) { return float(v / 65535.0 * 2.0 - 1.0); };
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        if (nrm.at(r, c, 0) == 0 && nrm.at(r, c, 1) == 0 && nrm.at(r, c, 2) == 0) continue;
        Eigen::Vector3f n{dec(nrm.at(r, c, 0)), dec(nrm.at(r, c, 1)), dec(nrm.at(r, c, 2))};
        const float len = n.norm();
        if (len < 1e-6f) continue;
        n /= len;
        s.normals.nx(r, c) = n.x();
        s.normals.ny(r, c) = n.y();
        s.normals.nz(r, c) = n.z();
        s.normals.valid(r, c) = true;
      }
  }

  s.mixed = MaskGrid::Constant(H, W, false);
  if (fs::exists(dir / "mixed.png")) {
    const ImageU8 mix = read_png_u8(dir / "mixed.png");
    if (mix.channels != 1 || mix.width != W || mix.height != H)
      throw std::runtime_error("bad mixed png: " + dir.string());
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) s.mixed(r, c) = mix.at(r, c) >= 128;
  }

  s.id = (dir.parent_path().filename() / dir.filename()).string();
  return s;
}

}  // namespace normfill
