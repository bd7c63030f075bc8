#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "normfill/geometry.hpp"

namespace normfill {

// Procedural street-ish scenes in the camera frame: a ground plane, yawed
// boxes and vertical cylinders standing on it, one directional sun.

struct GroundPlane {
  double height = 1.5;  // camera sits 1.5 m above it, y points down
  Eigen::Vector3d albedo{0.4, 0.4, 0.42};
};

struct Box {
  Eigen::Vector3d center;
  Eigen::Vector3d half_extents;
  double yaw = 0.0;  // about the y axis
  Eigen::Vector3d albedo;
};

struct Cylinder {
  double x = 0.0, z = 10.0;  // vertical axis position
  double radius = 0.2;
  double y_top = -2.0;  // smaller y is higher
  double y_bottom = 1.5;
  Eigen::Vector3d albedo;
};

struct Scene {
  GroundPlane ground;
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
  Eigen::Vector3d sun_dir{0.3, -0.8, 0.5};  // toward the sun, unit length
  Eigen::Vector3d sky_color{0.6, 0.7, 0.88};
};

enum class Difficulty { easy, hard };

/// Seeded scene with easy 3-5 or hard 10-20 primitives standing on the ground.
Scene build_scene(uint64_t seed, Difficulty difficulty);

struct RayHit {
  double t = 0.0;  // depth when the ray direction has z == 1
  Eigen::Vector3d normal;  // outward unit normal
  Eigen::Vector3d albedo;
};

/// Nearest intersection along origin + t * dir, t > 1e-6.
std::optional<RayHit> raycast(const Scene& scene, const Eigen::Vector3d& origin,
                              const Eigen::Vector3d& dir);

struct LidarPattern {
  int beams = 16;
  double elev_min_deg = -12.0, elev_max_deg = 2.0;
  double azimuth_min_deg = -44.0, azimuth_max_deg = 44.0;
  double azimuth_step_deg = 2.6;
  // Beams fire in sequence while the head turns, so each beam's azimuth grid
  // is offset by beam_index/beams of a step, as on real spinning scanners.
  // Without it all beams share one column grid and returns almost never
  // collide on a pixel, which suppresses occlusion mixing entirely.
  bool stagger_azimuth = true;
  double max_range = kZMax;
  RigidTransform sensor_to_camera;  // default: 0.3 m right, 0.2 m up

  static LidarPattern desk_default();
};

struct Sample {
  std::string id;
  Eigen::ArrayXXf red, green, blue;  // [0,1]
  DepthMap sparse;
  DepthMap dense;    // ground truth
  NormalMap normals;  // ground truth
  MaskGrid mixed;    // returns poisoned by occlusion mixing

  /// Pixels carrying a sparse return; always equal to sparse.valid.
  const MaskGrid& binary_mask() const { return sparse.valid; }
  int height() const { return sparse.height(); }
  int width() const { return sparse.width(); }
};

/// Renders rgb, dense depth, analytic normals through the camera, then scans
/// the scene with the displaced sensor and warps the returns back, which is
/// where mixed pixels come from. Deterministic for fixed inputs.
Sample raycast_sample(const Scene& scene, const CameraIntrinsics& K, const LidarPattern& lidar);

/// Bernoulli(1/denominator) thinning of valid pixels. Denominator must be
/// one of 1, 4, 16, 64, 256.
DepthMap subsample_depth(const DepthMap& d, int denominator, uint64_t seed);
Sample subsample_sparse(const Sample& s, int denominator, uint64_t seed);

/// Depth png encoding: 16-bit, value = round(meters * 256), 0 = invalid.
uint16_t encode_depth_png(float meters);
float decode_depth_png(uint16_t value);

void write_sample(const std::filesystem::path& dir, const Sample& s);
/// Reads a sample directory. normals.png and mixed.png may be absent
/// (imported datasets), in which case those fields come back all-invalid.
Sample read_sample(const std::filesystem::path& dir);

struct DatasetSpec {
  std::filesystem::path root;
  int n_total = 220;  // split 10:1 into train and val
  uint64_t seed = 0;
  Difficulty difficulty = Difficulty::hard;
  CameraIntrinsics camera = desk_camera();
  LidarPattern lidar = LidarPattern::desk_default();
  int threads = 1;
};

/// Generates train/ and val/ sample directories, manifest.jsonl and
/// dataset.json under root. Per-sample RNG streams make the output
/// byte-identical for any thread count.
void generate_dataset(const DatasetSpec& spec);

struct Dataset {
  CameraIntrinsics camera;
  std::vector<Sample> train, val;
};

Dataset load_dataset(const std::filesystem::path& root);

}  // namespace normfill
