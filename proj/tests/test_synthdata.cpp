#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "normfill/synthdata.hpp"
#include "normfill/util.hpp"

using namespace normfill;

namespace {

std::filesystem::path test_dir(const char* leaf) {
  const auto dir = std::filesystem::temp_directory_path() / "nf_synth_test" / leaf;
  std::filesystem::create_directories(dir);
  return dir;
}

int primitive_count(const Scene& s) {
  return int(s.boxes.size() + s.cylinders.size());
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.boxes.size() != b.boxes.size() || a.cylinders.size() != b.cylinders.size()) return false;
  for (size_t i = 0; i < a.boxes.size(); ++i)
    if (a.boxes[i].center != b.boxes[i].center || a.boxes[i].yaw != b.boxes[i].yaw ||
        a.boxes[i].half_extents != b.boxes[i].half_extents)
      return false;
  for (size_t i = 0; i < a.cylinders.size(); ++i)
    if (a.cylinders[i].x != b.cylinders[i].x || a.cylinders[i].z != b.cylinders[i].z ||
        a.cylinders[i].radius != b.cylinders[i].radius)
      return false;
  return a.sun_dir == b.sun_dir;
}

/// The scan loop of raycast_sample, replicated so the mixed mask can be
/// cross-checked against warp_lidar_to_camera on the raw point list.
std::vector<Eigen::Vector3d> scan_points(const Scene& scene, const LidarPattern& lidar) {
  std::vector<Eigen::Vector3d> pts;
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
      const Eigen::Vector3d d{std::cos(e) * std::sin(a), -std::sin(e),
                              std::cos(e) * std::cos(a)};
      const auto hit = raycast(scene, origin, R * d);
      if (!hit || hit->t > lidar.max_range) continue;
      pts.push_back(R.transpose() * ((origin + hit->t * (R * d)) - origin));
    }
  }
  return pts;
}

}  // namespace

TEST_CASE("scene construction is deterministic and difficulty-scaled") {
  for (uint64_t seed : {3u, 17u, 90u}) {
    CHECK(same_scene(build_scene(seed, Difficulty::hard), build_scene(seed, Difficulty::hard)));
    const int n_hard = primitive_count(build_scene(seed, Difficulty::hard));
    CHECK(n_hard >= 10);
    CHECK(n_hard <= 20);
    const int n_easy = primitive_count(build_scene(seed, Difficulty::easy));
    CHECK(n_easy >= 3);
    CHECK(n_easy <= 5);
  }
  CHECK_FALSE(same_scene(build_scene(1, Difficulty::hard), build_scene(2, Difficulty::hard)));
}

TEST_CASE("ground-only render matches the analytic plane") {
  const CameraIntrinsics K = desk_camera();
  Scene scene;  // just the default ground at y = 1.5
  const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());

  for (int r = 0; r < K.height; ++r)
    for (int c = 0; c < K.width; ++c) {
      const double dy = (r - K.cy) / K.fy;
      if (dy <= 0.0) {
        CHECK_FALSE(s.dense.valid(r, c));  // sky
        continue;
      }
      const double z = scene.ground.height / dy;
      if (z > kZMax) {
        CHECK_FALSE(s.dense.valid(r, c));
        continue;
      }
      REQUIRE(s.dense.valid(r, c));
      CHECK(std::abs(s.dense.values(r, c) - z) <= 1e-6 * z);
      REQUIRE(s.normals.valid(r, c));
      CHECK(s.normals.nx(r, c) == 0.0f);
      CHECK(s.normals.ny(r, c) == -1.0f);
      CHECK(s.normals.nz(r, c) == 0.0f);
    }
}

TEST_CASE("a near box in front of the ground mixes returns along its edge") {
  const CameraIntrinsics K = desk_camera();
  Scene scene;
  Box b;
  b.half_extents = {0.5, 1.0, 0.5};
  b.center = {0.8, scene.ground.height - 1.0, 5.0};
  b.albedo = {0.7, 0.3, 0.2};
  scene.boxes.push_back(b);

  const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());
  CHECK(s.mixed.count() > 0);

  // Front-face silhouette columns; the displaced sensor sees the ground just
  // past these edges, and those returns land inside the silhouette.
  const int col_left = int(K.cx + K.fx * (b.center.x() - 0.5) / 4.5);
  const int col_right = int(K.cx + K.fx * (b.center.x() + 0.5) / 4.5);
  for (int r = 0; r < K.height; ++r)
    for (int c = 0; c < K.width; ++c) {
      if (!s.mixed(r, c)) continue;
      // every mixed return carries background depth where the camera sees box
      CHECK(s.sparse.values(r, c) >
            s.dense.values(r, c) + float(0.9 * kMixThreshold));
      const bool near_edge =
          std::abs(c - col_left) <= 8 || std::abs(c - col_right) <= 8;
      CHECK(near_edge);
    }
}

TEST_CASE("mixed returns match the visibility oracle") {
  const CameraIntrinsics K = desk_camera();
  const LidarPattern lidar = LidarPattern::desk_default();
  for (uint64_t seed : {5u, 23u}) {
    const Scene scene = build_scene(seed, Difficulty::hard);
    const Sample s = raycast_sample(scene, K, lidar);

    const auto pts = scan_points(scene, lidar);
    const WarpResult w = warp_lidar_to_camera(pts, lidar.sensor_to_camera, K);
    CHECK((s.mixed == w.mixed).all());
    CHECK((s.sparse.valid == w.sparse.valid).all());
    CHECK((s.sparse.values == w.sparse.values).all());

    // and against the z-buffer definition directly
    std::vector<Eigen::Vector3d> cam;
    for (const auto& p : pts) cam.push_back(lidar.sensor_to_camera.apply(p));
    const DepthMap zbuf = rasterize_zbuffer(cam, K);
    for (int r = 0; r < K.height; ++r)
      for (int c = 0; c < K.width; ++c) {
        const bool oracle = s.sparse.valid(r, c) && zbuf.valid(r, c) &&
                            double(s.sparse.values(r, c)) - double(zbuf.values(r, c)) >
                                kMixThreshold;
        CHECK(s.mixed(r, c) == oracle);
      }
  }
}

TEST_CASE("default scan density lands in the target band") {
  const CameraIntrinsics K = desk_camera();
  double sum = 0.0;
  const int n = 12;
  long long mixed_total = 0;
  for (uint64_t seed = 1; seed <= n; ++seed) {
    const Scene scene = build_scene(seed, Difficulty::hard);
    const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());
    const double density =
        double(s.sparse.valid_count()) / double(K.width * K.height);
    CHECK(density >= 0.02);
    CHECK(density <= 0.08);
    sum += density;
    mixed_total += s.mixed.count();
  }
  CHECK(sum / n > 0.03);
  CHECK(sum / n < 0.055);
  // occlusion mixing must actually occur in the default data
  CHECK(mixed_total > n);
}

TEST_CASE("subsampling keeps statistics and identity") {
  const CameraIntrinsics K = desk_camera();
  const Scene scene = build_scene(77, Difficulty::hard);
  const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());
  const int64_t n_valid = s.sparse.valid_count();
  REQUIRE(n_valid > 200);

  SUBCASE("ratio one is the identity") {
    const Sample same = subsample_sparse(s, 1, 123);
    CHECK((same.sparse.valid == s.sparse.valid).all());
    CHECK((same.sparse.values == s.sparse.values).all());
    CHECK((same.mixed == s.mixed).all());
  }

  SUBCASE("bad denominators are rejected") {
    CHECK_THROWS_AS(subsample_sparse(s, 3, 0), std::invalid_argument);
    CHECK_THROWS_AS(subsample_sparse(s, 0, 0), std::invalid_argument);
  }

  SUBCASE("retention follows the binomial expectation") {
    const double p = 1.0 / 16.0;
    const double mean_expect = double(n_valid) * p;
    const double sigma = std::sqrt(double(n_valid) * p * (1.0 - p));
    double mean = 0.0;
    int outside_2s = 0;
    const int runs = 100;
    for (int i = 0; i < runs; ++i) {
      const Sample thin = subsample_sparse(s, 16, uint64_t(1000 + i));
      const double kept = double(thin.sparse.valid_count());
      mean += kept;
      if (std::abs(kept - mean_expect) > 2.0 * sigma) ++outside_2s;
      // retained pixels are a subset with unchanged values
      CHECK((thin.sparse.valid && !s.sparse.valid).count() == 0);
      CHECK((thin.mixed && !thin.sparse.valid).count() == 0);
    }
    mean /= runs;
    CHECK(std::abs(mean - mean_expect) <= 2.0 * sigma / std::sqrt(double(runs)));
    CHECK(outside_2s <= 12);  // ~5% expected beyond 2 sigma
  }

  SUBCASE("reference arithmetic at full scale") {
    // A 4.3%-dense 1216x352 map thinned 1/256 keeps about 72 returns.
    const int W = 1216, H = 352;
    const int64_t target = int64_t(std::llround(0.043 * W * H));
    DepthMap big(H, W);
    auto rng = make_rng(9, 2);
    std::uniform_int_distribution<int> rr(0, H - 1), cc(0, W - 1);
    int64_t placed = 0;
    while (placed < target) {
      const int r = rr(rng), c = cc(rng);
      if (big.valid(r, c)) continue;
      big.values(r, c) = 10.0f;
      big.valid(r, c) = true;
      ++placed;
    }
    const double p = 1.0 / 256.0;
    const double sigma = std::sqrt(double(target) * p * (1.0 - p));
    const DepthMap thin = subsample_depth(big, 256, 4242);
    CHECK(std::abs(double(thin.valid_count()) - 72.0) <= 2.0 * sigma + 1.0);
  }
}

TEST_CASE("depth png encoding is exact and invertible") {
  CHECK(encode_depth_png(10.0f) == 2560);
  CHECK(encode_depth_png(0.0f) == 0);
  CHECK(encode_depth_png(-1.0f) == 0);
  CHECK(decode_depth_png(0) == 0.0f);
  CHECK(decode_depth_png(2560) == 10.0f);

  auto rng = make_rng(13, 0);
  std::uniform_real_distribution<double> uni(0.01, kZMax);
  float worst = 0.0f;
  for (int i = 0; i < 10000; ++i) {
    const float d = float(uni(rng));
    const float back = decode_depth_png(encode_depth_png(d));
    worst = std::max(worst, std::abs(back - d));
  }
  CHECK(worst <= 1.0f / 512.0f + 1e-6f);
}

TEST_CASE("samples survive a disk round trip") {
  const CameraIntrinsics K = desk_camera();
  const Scene scene = build_scene(31, Difficulty::hard);
  const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());
  const auto dir = test_dir("roundtrip");
  write_sample(dir, s);

  const Sample back = read_sample(dir);
  CHECK(back.width() == s.width());
  CHECK(back.height() == s.height());
  CHECK((back.sparse.valid == s.sparse.valid).all());
  CHECK((back.dense.valid == s.dense.valid).all());
  CHECK((back.mixed == s.mixed).all());
  CHECK((back.normals.valid == s.normals.valid).all());

  float depth_err = 0.0f, rgb_err = 0.0f;
  double normal_err = 0.0;
  for (int r = 0; r < s.height(); ++r)
    for (int c = 0; c < s.width(); ++c) {
      if (s.dense.valid(r, c))
        depth_err = std::max(depth_err,
                             std::abs(back.dense.values(r, c) - s.dense.values(r, c)));
      if (s.sparse.valid(r, c))
        depth_err = std::max(depth_err,
                             std::abs(back.sparse.values(r, c) - s.sparse.values(r, c)));
      rgb_err = std::max({rgb_err, std::abs(back.red(r, c) - s.red(r, c)),
                          std::abs(back.green(r, c) - s.green(r, c)),
                          std::abs(back.blue(r, c) - s.blue(r, c))});
      if (s.normals.valid(r, c)) {
        const double dot = double(back.normals.nx(r, c)) * s.normals.nx(r, c) +
                           double(back.normals.ny(r, c)) * s.normals.ny(r, c) +
                           double(back.normals.nz(r, c)) * s.normals.nz(r, c);
        normal_err = std::max(normal_err, 1.0 - dot);
      }
    }
  CHECK(depth_err <= 1.0f / 512.0f + 1e-6f);
  CHECK(rgb_err <= 0.5f / 255.0f + 1e-6f);
  CHECK(normal_err < 1e-7);  // 16-bit quantization, then renormalized

  // quantized normals still come back unit length
  for (int r = 0; r < s.height(); ++r)
    for (int c = 0; c < s.width(); ++c)
      if (back.normals.valid(r, c)) {
        const double n2 = double(back.normals.nx(r, c)) * back.normals.nx(r, c) +
                          double(back.normals.ny(r, c)) * back.normals.ny(r, c) +
                          double(back.normals.nz(r, c)) * back.normals.nz(r, c);
        CHECK(std::abs(n2 - 1.0) < 1e-5);
      }

  CHECK_THROWS_WITH_AS(read_sample(test_dir("missing")),
                       doctest::Contains("missing"), std::runtime_error);
}

TEST_CASE("generated datasets are reproducible and split 10:1") {
  DatasetSpec spec;
  spec.n_total = 11;
  spec.seed = 404;
  spec.root = test_dir("gen_a");
  generate_dataset(spec);

  std::ifstream manifest(spec.root / "manifest.jsonl");
  REQUIRE(manifest.good());
  int lines = 0, train_lines = 0;
  std::string line;
  while (std::getline(manifest, line))
    if (!line.empty()) {
      ++lines;
      if (line.find("\"train\"") != std::string::npos) ++train_lines;
    }
  CHECK(lines == 11);
  CHECK(train_lines == 10);

  const Dataset ds = load_dataset(spec.root);
  CHECK(ds.train.size() == 10);
  CHECK(ds.val.size() == 1);
  CHECK(ds.camera.width == 192);

  DatasetSpec again = spec;
  again.root = test_dir("gen_b");
  again.threads = 4;  // parallel rendering must not change bytes
  generate_dataset(again);
  for (const char* rel : {"train/00003/sparse.png", "train/00007/rgb.png",
                          "val/00000/dense.png", "manifest.jsonl"}) {
    const std::string a = read_text_file(spec.root / rel);
    const std::string b = read_text_file(again.root / rel);
    CHECK(a == b);
  }
}

TEST_CASE("generated normals are unit camera-facing and consistent with plane fits") {
  const CameraIntrinsics K = desk_camera();
  const Scene scene = build_scene(8, Difficulty::hard);
  const Sample s = raycast_sample(scene, K, LidarPattern::desk_default());

  for (int r = 0; r < K.height; ++r)
    for (int c = 0; c < K.width; ++c) {
      if (!s.normals.valid(r, c)) continue;
      const double n2 = double(s.normals.nx(r, c)) * s.normals.nx(r, c) +
                        double(s.normals.ny(r, c)) * s.normals.ny(r, c) +
                        double(s.normals.nz(r, c)) * s.normals.nz(r, c);
      CHECK(std::abs(n2 - 1.0) < 1e-5);
      // camera-facing means against the viewing ray, not nz < 0; oblique
      // side faces can tilt a little toward +z and still face the pixel
      const Eigen::Vector3d d = pixel_ray(c, r, K);
      const double facing = s.normals.nx(r, c) * d.x() +
                            s.normals.ny(r, c) * d.y() + s.normals.nz(r, c) * d.z();
      CHECK(facing <= 1e-6);
    }

  const NormalMap fitted = fit_plane_normals(s.dense, K);
  std::vector<double> angles;
  for (int r = 2; r < K.height - 2; ++r)
    for (int c = 2; c < K.width - 2; ++c) {
      if (!fitted.valid(r, c) || !s.normals.valid(r, c)) continue;
      const double dot = std::clamp(
          double(fitted.nx(r, c)) * s.normals.nx(r, c) +
              double(fitted.ny(r, c)) * s.normals.ny(r, c) +
              double(fitted.nz(r, c)) * s.normals.nz(r, c),
          -1.0, 1.0);
      angles.push_back(std::acos(dot) * 180.0 / M_PI);
    }
  REQUIRE(angles.size() > 1000);
  std::nth_element(angles.begin(), angles.begin() + angles.size() / 2, angles.end());
  CHECK(angles[angles.size() / 2] < 1.0);
}
