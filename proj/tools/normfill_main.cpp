// Depth completion workbench: dataset synthesis, training, evaluation,
// ablations, sparsity sweeps and visualization behind one binary.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "normfill/baselines.hpp"
#include "normfill/eval.hpp"
#include "normfill/model.hpp"
#include "normfill/synthdata.hpp"
#include "normfill/training.hpp"
#include "normfill/util.hpp"

namespace fs = std::filesystem;
using namespace normfill;

namespace {

struct CommonArgs {
  uint64_t seed = 0;
  int threads = int(std::thread::hardware_concurrency());
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--seed", args.seed, "Base RNG seed")
      ->envname("NORMFILL_SEED")
      ->capture_default_str();
  cmd->add_option("--threads", args.threads, "Worker threads for data generation")
      ->capture_default_str();
}

/// The fully resolved option set, written next to the outputs so any run can
/// be replayed with --config alone. The section header routes the keys back
/// into the right subcommand on the way in.
void write_resolved(CLI::App* cmd, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text_file(out_dir / "resolved.config",
                  "[" + cmd->get_name() + "]\n" + cmd->config_to_str(true, false));
}

std::vector<int> parse_epochs(const std::string& text) {
  std::vector<int> out;
  std::string body = text;
  for (char& c : body)
    if (c == ',') c = ' ';
  std::istringstream in(body);
  int x;
  while (in >> x) out.push_back(x);
  if (out.size() != 3)
    throw CLI::ValidationError("--epochs-per-stage", "expected three comma-separated counts");
  return out;
}

CompletionFn make_method(const std::string& method) {
  if (method == "nearest")
    return [](const Sample& s) { return nearest_fill(s.sparse); };
  if (method == "bilateral")
    return [](const Sample& s) { return bilateral_fill(s); };
  if (method == "gt")
    return [](const Sample& s) { return s.dense; };
  // Anything else is a checkpoint path; the model loads once and is shared.
  auto model = std::make_shared<DepthModel<float>>(load_model(method));
  return [model](const Sample& s) { return predict_depth(*model, s); };
}

int run_gen_data(const fs::path& out, int n, const std::string& difficulty,
                 const CommonArgs& common) {
  DatasetSpec spec;
  spec.root = out;
  spec.n_total = n;
  spec.seed = common.seed;
  spec.threads = std::max(1, common.threads);
  if (difficulty == "easy")
    spec.difficulty = Difficulty::easy;
  else if (difficulty == "hard")
    spec.difficulty = Difficulty::hard;
  else
    throw CLI::ValidationError("--difficulty", "must be easy or hard");
  generate_dataset(spec);
  std::printf("wrote %d samples under %s\n", n, out.string().c_str());
  return 0;
}

int run_train(const fs::path& data, const fs::path& out, const std::string& variant,
              const std::string& epochs, const CommonArgs& common) {
  const Dataset ds = load_dataset(data);
  ModelConfig cfg = make_variant(ModelConfig{}, variant);
  cfg.seed = common.seed;
  DepthModel<float> model(cfg);
  TrainOptions opt;
  opt.out_dir = out;
  opt.variant = variant;
  opt.seed = common.seed;
  TrainResult result = run_schedule(model, ds, Schedule::standard(parse_epochs(epochs)), opt);
  if (result.aborted) {
    std::fprintf(stderr, "training aborted: %s\n", result.abort_reason.c_str());
    std::fprintf(stderr, "last good checkpoint: %s\n", result.best_checkpoint.string().c_str());
    return 2;
  }
  std::printf("best val rmse %.3f mm at epoch %d\n", result.best_val_rmse_mm, result.best_epoch);
  std::printf("checkpoint: %s\n", result.best_checkpoint.string().c_str());
  return 0;
}

int run_eval(const fs::path& data, const fs::path& out, const std::string& method,
             const std::string& split) {
  const Dataset ds = load_dataset(data);
  const std::vector<Sample>& samples = split == "train" ? ds.train : ds.val;
  EvalResult result = evaluate_method(samples, make_method(method));
  fs::create_directories(out);
  write_text_file(out / "eval.csv", eval_csv(result));
  const MetricReport& m = result.pooled;
  std::printf("%s on %s/%s: rmse %.3f mm, mae %.3f mm, irmse %.3f /km, rel %.5f, d1 %.2f%%\n",
              method.c_str(), data.string().c_str(), split.c_str(), m.rmse_mm, m.mae_mm,
              m.irmse_per_km, m.rel, m.delta1);
  return 0;
}

int run_ablate(const fs::path& data, const fs::path& out, const std::string& epochs,
               const CommonArgs& common) {
  const Dataset ds = load_dataset(data);
  std::ostringstream csv;
  csv << "variant, val_rmse_mm, mae_mm, irmse, imae, rel, d1, d2, d3, n_px\n";
  for (const std::string& variant : variant_names()) {
    ModelConfig cfg = make_variant(ModelConfig{}, variant);
    cfg.seed = common.seed;
    DepthModel<float> model(cfg);
    TrainOptions opt;
    opt.out_dir = out / variant;
    opt.variant = variant;
    opt.seed = common.seed;
    TrainResult r = run_schedule(model, ds, Schedule::standard(parse_epochs(epochs)), opt);
    if (r.aborted) {
      std::fprintf(stderr, "%s aborted: %s\n", variant.c_str(), r.abort_reason.c_str());
      return 2;
    }
    DepthModel<float> best = load_model(r.best_checkpoint);
    EvalResult ev = evaluate_method(
        ds.val, [&best](const Sample& s) { return predict_depth(best, s); });
    const MetricReport& m = ev.pooled;
    csv << strprintf("%s, %.6f, %.6f, %.6f, %.6f, %.8f, %.4f, %.4f, %.4f, %lld\n",
                     variant.c_str(), m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km, m.rel,
                     m.delta1, m.delta2, m.delta3, (long long)m.n_pixels);
    std::printf("%-14s val rmse %.3f mm\n", variant.c_str(), m.rmse_mm);
  }
  fs::create_directories(out);
  write_text_file(out / "ablation.csv", csv.str());
  return 0;
}

int run_sweep(const fs::path& data, const fs::path& out, const std::string& method,
              const std::string& split, const CommonArgs& common) {
  const Dataset ds = load_dataset(data);
  const std::vector<Sample>& samples = split == "train" ? ds.train : ds.val;
  const auto rows = sparsity_sweep(samples, make_method(method), common.seed);
  fs::create_directories(out);
  write_text_file(out / "sweep.csv", sweep_csv(rows));
  for (const SweepRow& r : rows)
    std::printf("1/%-4d density %6.3f%%  rmse %9.3f mm\n", r.denominator, r.density_pct,
                r.metrics.rmse_mm);
  return 0;
}

void blit(ImageU8& panel, const ImageU8& tile, int tile_row, int tile_col) {
  for (int r = 0; r < tile.height; ++r)
    for (int c = 0; c < tile.width; ++c)
      for (int ch = 0; ch < 3; ++ch)
        panel.at(tile_row * tile.height + r, tile_col * tile.width + c, ch) =
            tile.channels == 3 ? tile.at(r, c, ch) : tile.at(r, c, 0);
}

ImageU8 gray_tile(const Eigen::ArrayXXf& v) {
  ImageU8 img;
  img.width = int(v.cols());
  img.height = int(v.rows());
  img.channels = 1;
  img.pixels.resize(size_t(img.width) * img.height);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      img.at(r, c) = uint8_t(std::lround(std::clamp(double(v(r, c)), 0.0, 1.0) * 255.0));
  return img;
}

int run_render(const fs::path& sample_dir, const fs::path& ckpt, const fs::path& out) {
  const Sample s = read_sample(sample_dir);
  DepthModel<float> model = load_model(ckpt);
  const ModelOutput<float> mo = predict_outputs(model, s);
  const int H = s.height(), W = s.width();
  const int64_t plane = int64_t(H) * W;

  DepthRange range{0.0, kZMax};
  if (s.dense.valid_count() > 0) {
    float lo = kZMax, hi = 0;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        if (s.dense.valid(r, c)) {
          lo = std::min(lo, s.dense.values(r, c));
          hi = std::max(hi, s.dense.values(r, c));
        }
    if (lo < hi) range = {double(lo), double(hi)};
  }

  auto tensor_depth = [&](const Tensor<float>& t) {
    DepthMap d(H, W);
    for (int64_t i = 0; i < plane; ++i) {
      d.values(int(i / W), int(i % W)) = t.data()[i];
      d.valid(int(i / W), int(i % W)) = true;
    }
    return d;
  };
  auto tensor_plane = [&](const Tensor<float>& t) {
    Eigen::ArrayXXf v(H, W);
    for (int64_t i = 0; i < plane; ++i) v(int(i / W), int(i % W)) = t.data()[i];
    return v;
  };

  ImageU8 rgb;
  rgb.width = W;
  rgb.height = H;
  rgb.channels = 3;
  rgb.pixels.resize(size_t(plane) * 3);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      rgb.at(r, c, 0) = uint8_t(std::lround(std::clamp(double(s.red(r, c)), 0.0, 1.0) * 255));
      rgb.at(r, c, 1) = uint8_t(std::lround(std::clamp(double(s.green(r, c)), 0.0, 1.0) * 255));
      rgb.at(r, c, 2) = uint8_t(std::lround(std::clamp(double(s.blue(r, c)), 0.0, 1.0) * 255));
    }

  ImageU8 normals_img;
  normals_img.width = W;
  normals_img.height = H;
  normals_img.channels = 3;
  normals_img.pixels.assign(size_t(plane) * 3, 0);
  if (mo.normals.defined()) {
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        for (int ch = 0; ch < 3; ++ch) {
          const float n = mo.normals.data()[(int64_t(ch) * H + r) * W + c];
          normals_img.at(r, c, ch) = uint8_t(std::lround((double(n) + 1.0) / 2.0 * 255.0));
        }
  }

  ImageU8 panel;
  panel.width = 3 * W;
  panel.height = 3 * H;
  panel.channels = 3;
  panel.pixels.assign(size_t(panel.width) * panel.height * 3, 0);

  ImageU8 black = gray_tile(Eigen::ArrayXXf::Zero(H, W));
  blit(panel, rgb, 0, 0);
  blit(panel, render_depth(s.sparse, range), 0, 1);
  blit(panel, mo.depth_color.defined() ? render_depth(tensor_depth(mo.depth_color), range) : black,
       0, 2);
  blit(panel,
       mo.depth_normal.defined() ? render_depth(tensor_depth(mo.depth_normal), range) : black, 1,
       0);
  blit(panel, mo.w_normal.defined() ? gray_tile(tensor_plane(mo.w_normal)) : black, 1, 1);
  blit(panel, mo.confidence.defined() ? gray_tile(tensor_plane(mo.confidence)) : black, 1, 2);
  blit(panel, normals_img, 2, 0);
  blit(panel, render_depth(tensor_depth(mo.depth_final), range), 2, 1);
  blit(panel, render_depth(s.dense, range), 2, 2);

  fs::create_directories(out);
  write_png(out / "panel.png", panel);
  std::printf("wrote %s\n", (out / "panel.png").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normfill: normal-guided depth completion on procedural desk scenes"};
  app.require_subcommand(1);
  // The config file lives on the root app (subcommand config files are not
  // processed) and selects its subcommand through the section header; the
  // fallthrough lets `normfill <cmd> --config f` reach it.
  app.fallthrough();
  app.set_config("--config", "", "Read options from a config file");

  CommonArgs common;

  auto* gen = app.add_subcommand("gen-data", "Generate a procedural dataset");
  gen->configurable();
  fs::path gen_out;
  int gen_n = 220;
  std::string gen_difficulty = "hard";
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--n", gen_n, "Total sample count (10:1 train/val split)")
      ->capture_default_str();
  gen->add_option("--difficulty", gen_difficulty, "easy or hard")
      ->check(CLI::IsMember({"easy", "hard"}))
      ->capture_default_str();
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "Train a model variant");
  train->configurable();
  fs::path train_data, train_out;
  std::string train_variant = "full", train_epochs = "5,5,10";
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--variant", train_variant, "Model variant")
      ->check(CLI::IsMember(variant_names()))
      ->capture_default_str();
  train->add_option("--epochs-per-stage", train_epochs, "Three comma-separated epoch counts")
      ->capture_default_str();
  add_common(train, common);

  auto* eval = app.add_subcommand("eval", "Evaluate a method on a split");
  eval->configurable();
  fs::path eval_data, eval_out;
  std::string eval_method, eval_split = "val";
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--method", eval_method, "Checkpoint path, nearest, bilateral or gt")
      ->required();
  eval->add_option("--split", eval_split, "train or val")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  add_common(eval, common);

  auto* ablate = app.add_subcommand("ablate", "Train and compare every variant");
  ablate->configurable();
  fs::path ablate_data, ablate_out;
  std::string ablate_epochs = "5,5,10";
  ablate->add_option("--data", ablate_data, "Dataset directory")->required();
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate->add_option("--epochs-per-stage", ablate_epochs, "Three comma-separated epoch counts")
      ->capture_default_str();
  add_common(ablate, common);

  auto* sweep = app.add_subcommand("sweep", "Accuracy versus input sparsity");
  sweep->configurable();
  fs::path sweep_data, sweep_out;
  std::string sweep_method, sweep_split = "val";
  sweep->add_option("--data", sweep_data, "Dataset directory")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--method", sweep_method, "Checkpoint path, nearest, bilateral or gt")
      ->required();
  sweep->add_option("--split", sweep_split, "train or val")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  add_common(sweep, common);

  auto* render = app.add_subcommand("render", "Render a diagnostic panel for one sample");
  render->configurable();
  fs::path render_sample, render_ckpt, render_out;
  render->add_option("--sample", render_sample, "Sample directory")->required();
  render->add_option("--ckpt", render_ckpt, "Checkpoint path")->required();
  render->add_option("--out", render_out, "Output directory")->required();
  add_common(render, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      write_resolved(gen, gen_out);
      return run_gen_data(gen_out, gen_n, gen_difficulty, common);
    }
    if (train->parsed()) {
      write_resolved(train, train_out);
      return run_train(train_data, train_out, train_variant, train_epochs, common);
    }
    if (eval->parsed()) {
      write_resolved(eval, eval_out);
      return run_eval(eval_data, eval_out, eval_method, eval_split);
    }
    if (ablate->parsed()) {
      write_resolved(ablate, ablate_out);
      return run_ablate(ablate_data, ablate_out, ablate_epochs, common);
    }
    if (sweep->parsed()) {
      write_resolved(sweep, sweep_out);
      return run_sweep(sweep_data, sweep_out, sweep_method, sweep_split, common);
    }
    if (render->parsed()) {
      write_resolved(render, render_out);
      return run_render(render_sample, render_ckpt, render_out);
    }
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    std::fprintf(stderr, "run '%s --help' for usage\n", argv[0]);
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
