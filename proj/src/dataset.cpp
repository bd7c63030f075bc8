#include <json.hpp>

#include <fstream>
#include <string>

#include "normfill/synthdata.hpp"
#include "normfill/util.hpp"

namespace normfill {

using nlohmann::json;

namespace {

json camera_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx},
          {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
}

CameraIntrinsics camera_from_json(const json& j) {
  CameraIntrinsics K;
  K.fx = j.at("fx").get<double>();
  K.fy = j.at("fy").get<double>();
  K.cx = j.at("cx").get<double>();
  K.cy = j.at("cy").get<double>();
  K.width = j.at("width").get<int>();
  K.height = j.at("height").get<int>();
  return K;
}

std::string sample_dir_name(int index) { return strprintf("%05d", index); }

}  // namespace

void generate_dataset(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  if (spec.n_total <= 0) throw std::invalid_argument("generate_dataset: n_total must be positive");
  const int n_val = spec.n_total / 11;
  const int n_train = spec.n_total - n_val;
  fs::create_directories(spec.root / "train");
  if (n_val > 0) fs::create_directories(spec.root / "val");

  struct Entry {
    std::string path;
    std::string split;
    uint64_t scene_seed;
    int64_t sparse_returns;
    int64_t mixed_returns;
  };
  std::vector<Entry> entries(spec.n_total);

  parallel_for(spec.n_total, spec.threads, [&](int64_t k) {
    const bool is_train = k < n_train;
    const int local = is_train ? int(k) : int(k - n_train);
    const uint64_t scene_seed = splitmix64(splitmix64(spec.seed) ^ uint64_t(k));
    const Scene scene = build_scene(scene_seed, spec.difficulty);
    Sample s = raycast_sample(scene, spec.camera, spec.lidar);
    const std::string rel =
        std::string(is_train ? "train/" : "val/") + sample_dir_name(local);
    s.id = rel;
    write_sample(spec.root / rel, s);
    entries[k] = {rel, is_train ? "train" : "val", scene_seed, s.sparse.valid_count(),
                  int64_t(s.mixed.count())};
  });

  std::string manifest;
  for (const auto& e : entries) {
    json line = {{"path", e.path},
                 {"split", e.split},
                 {"scene_seed", e.scene_seed},
                 {"sparse_returns", e.sparse_returns},
                 {"mixed_returns", e.mixed_returns}};
    manifest += line.dump() + "\n";
  }
  write_text_file(spec.root / "manifest.jsonl", manifest);

  json meta = {{"camera", camera_json(spec.camera)},
               {"z_max", kZMax},
               {"seed", spec.seed},
               {"n_train", n_train},
               {"n_val", n_val},
               {"difficulty", spec.difficulty == Difficulty::easy ? "easy" : "hard"},
               {"lidar",
                {{"beams", spec.lidar.beams},
                 {"elev_min_deg", spec.lidar.elev_min_deg},
                 {"elev_max_deg", spec.lidar.elev_max_deg},
                 {"azimuth_min_deg", spec.lidar.azimuth_min_deg},
                 {"azimuth_max_deg", spec.lidar.azimuth_max_deg},
                 {"azimuth_step_deg", spec.lidar.azimuth_step_deg},
                 {"max_range", spec.lidar.max_range},
                 {"offset", {spec.lidar.sensor_to_camera.translation.x(),
                             spec.lidar.sensor_to_camera.translation.y(),
                             spec.lidar.sensor_to_camera.translation.z()}}}}};
  write_text_file(spec.root / "dataset.json", meta.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.camera = desk_camera();
  if (fs::exists(root / "dataset.json")) {
    const json meta = json::parse(read_text_file(root / "dataset.json"));
    ds.camera = camera_from_json(meta.at("camera"));
  }
  const fs::path manifest = root / "manifest.jsonl";
  if (!fs::exists(manifest))
    throw std::runtime_error("no manifest.jsonl under " + root.string());
  std::ifstream in(manifest);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string rel = j.at("path").get<std::string>();
    Sample s = read_sample(root / rel);
    s.id = rel;
    if (s.width() != ds.camera.width || s.height() != ds.camera.height)
      throw std::runtime_error("sample size does not match camera: " + rel);
    if (j.at("split").get<std::string>() == "train")
      ds.train.push_back(std::move(s));
    else
      ds.val.push_back(std::move(s));
  }
  if (ds.train.empty() && ds.val.empty())
    throw std::runtime_error("empty dataset at " + root.string());
  return ds;
}

}  // namespace normfill
