#include "normfill/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "normfill/adam.hpp"
#include "normfill/util.hpp"

namespace normfill {

Schedule Schedule::standard(const std::vector<int>& epochs) {
  if (epochs.size() != 3) throw std::invalid_argument("Schedule: need three epoch counts");
  for (int e : epochs)
    if (e < 0) throw std::invalid_argument("Schedule: epoch counts must be non-negative");
  Schedule s;
  s.stages = {{{0.0, 0.0, 0.0, 1.0}, epochs[0]},
              {{0.3, 0.3, 0.0, 0.1}, epochs[1]},
              {{0.3, 0.3, 0.5, 0.1}, epochs[2]}};
  return s;
}

template <typename S>
std::pair<BatchInputs<S>, BatchTargets<S>> make_batch(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int B = int(batch.size());
  const int H = batch[0]->height(), W = batch[0]->width();
  const int64_t plane = int64_t(H) * W;
  for (const Sample* s : batch)
    if (s->height() != H || s->width() != W)
      throw std::invalid_argument("make_batch: samples disagree on resolution");

  std::vector<S> rgb(size_t(B) * 3 * plane), sparse(size_t(B) * plane), mask(size_t(B) * plane);
  std::vector<S> dense(size_t(B) * plane), dmask(size_t(B) * plane);
  std::vector<S> nrm(size_t(B) * 3 * plane), nmask(size_t(B) * plane);
  for (int b = 0; b < B; ++b) {
    const Sample& s = *batch[b];
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const int64_t q = int64_t(r) * W + c;
        const int64_t base = int64_t(b) * plane + q;
        rgb[size_t((int64_t(b) * 3 + 0) * plane + q)] = S(s.red(r, c));
        rgb[size_t((int64_t(b) * 3 + 1) * plane + q)] = S(s.green(r, c));
        rgb[size_t((int64_t(b) * 3 + 2) * plane + q)] = S(s.blue(r, c));
        sparse[size_t(base)] = S(s.sparse.values(r, c));
        mask[size_t(base)] = S(s.sparse.valid(r, c) ? 1 : 0);
        dense[size_t(base)] = S(s.dense.values(r, c));
        dmask[size_t(base)] = S(s.dense.valid(r, c) ? 1 : 0);
        nrm[size_t((int64_t(b) * 3 + 0) * plane + q)] = S(s.normals.nx(r, c));
        nrm[size_t((int64_t(b) * 3 + 1) * plane + q)] = S(s.normals.ny(r, c));
        nrm[size_t((int64_t(b) * 3 + 2) * plane + q)] = S(s.normals.nz(r, c));
        nmask[size_t(base)] = S(s.normals.valid(r, c) ? 1 : 0);
      }
  }
  BatchInputs<S> in;
  in.rgb = Tensor<S>::from_data({B, 3, H, W}, std::move(rgb));
  in.sparse = Tensor<S>::from_data({B, 1, H, W}, std::move(sparse));
  in.mask = Tensor<S>::from_data({B, 1, H, W}, std::move(mask));
  BatchTargets<S> tgt;
  tgt.dense = Tensor<S>::from_data({B, 1, H, W}, std::move(dense));
  tgt.dense_mask = Tensor<S>::from_data({B, 1, H, W}, std::move(dmask));
  tgt.normals = Tensor<S>::from_data({B, 3, H, W}, std::move(nrm));
  tgt.normals_mask = Tensor<S>::from_data({B, 1, H, W}, std::move(nmask));
  return {std::move(in), std::move(tgt)};
}

template std::pair<BatchInputs<float>, BatchTargets<float>> make_batch<float>(
    const std::vector<const Sample*>&);
template std::pair<BatchInputs<double>, BatchTargets<double>> make_batch<double>(
    const std::vector<const Sample*>&);

namespace {

/// Validity of central-difference normals for a depth tensor slice taken as
/// a fully valid map (the network predicts strictly positive depth
/// everywhere). Ground truth keeps its own invalid pixels.
template <typename S>
DepthMap slice_to_depthmap(const Tensor<S>& t, int b, bool use_mask, const Tensor<S>* mask) {
  const int H = t.dim(2), W = t.dim(3);
  const int64_t plane = int64_t(H) * W;
  DepthMap d(H, W);
  const S* v = t.data() + int64_t(b) * plane;
  const S* m = use_mask ? mask->data() + int64_t(b) * plane : nullptr;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const S val = v[int64_t(r) * W + c];
      const bool ok = use_mask ? m[int64_t(r) * W + c] == S(1) : val > S(0);
      d.values(r, c) = float(val);
      d.valid(r, c) = ok && std::isfinite(double(val)) && val > S(0);
      if (!d.valid(r, c)) d.values(r, c) = 0.0f;
    }
  return d;
}

}  // namespace

template <typename S>
Tensor<S> depth_loss(const Tensor<S>& pred, const Tensor<S>& gt, const Tensor<S>& gt_mask,
                     const CameraIntrinsics& K) {
  detail::require(pred.defined() && gt.defined() && gt_mask.defined(),
                  "depth_loss: undefined input");
  detail::require(pred.ndim() == 4 && pred.dim(1) == 1, "depth_loss: pred must be [B,1,H,W]");
  Tensor<S> l2 = masked_l2_loss(pred, gt, gt_mask);

  const int B = pred.dim(0), H = pred.dim(2), W = pred.dim(3);
  const int64_t plane = int64_t(H) * W;
  std::vector<S> joint(size_t(B) * plane, S(0));
  int64_t n_joint = 0;
  std::vector<S> gtn(size_t(B) * 3 * plane, S(0));
  for (int b = 0; b < B; ++b) {
    const DepthMap pd = slice_to_depthmap<S>(pred, b, false, nullptr);
    const DepthMap gd = slice_to_depthmap<S>(gt, b, true, &gt_mask);
    const NormalMap pn = normals_from_depth(pd, K);
    const NormalMap gn = normals_from_depth(gd, K);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        if (!pn.valid(r, c) || !gn.valid(r, c)) continue;
        const int64_t q = int64_t(r) * W + c;
        joint[size_t(int64_t(b) * plane + q)] = S(1);
        ++n_joint;
        gtn[size_t((int64_t(b) * 3 + 0) * plane + q)] = S(gn.nx(r, c));
        gtn[size_t((int64_t(b) * 3 + 1) * plane + q)] = S(gn.ny(r, c));
        gtn[size_t((int64_t(b) * 3 + 2) * plane + q)] = S(gn.nz(r, c));
      }
  }
  if (n_joint == 0) return l2;

  Tensor<S> pred_n = normals_from_depth_t(pred, K);
  Tensor<S> gt_n = Tensor<S>::from_data({B, 3, H, W}, std::move(gtn));
  Tensor<S> joint_mask = Tensor<S>::from_data({B, 1, H, W}, std::move(joint));
  Tensor<S> surf = cosine_loss(pred_n, gt_n, joint_mask);
  return add(l2, scale(surf, S(0.5)));
}

template Tensor<float> depth_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                         const Tensor<float>&, const CameraIntrinsics&);
template Tensor<double> depth_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                           const Tensor<double>&, const CameraIntrinsics&);

template <typename S>
LossBreakdown<S> total_loss(const ModelOutput<S>& out, const BatchTargets<S>& tgt,
                            const LossWeights& w, const CameraIntrinsics& K) {
  if (w.dn < 0 || w.dc < 0 || w.dfinal < 0 || w.n < 0)
    throw std::invalid_argument("total_loss: weights must be non-negative");
  LossBreakdown<S> result;
  // Terms are evaluated inside the wrapper so an overflow tripping the
  // elementwise finite guards deep in the graph still surfaces with the name
  // of the loss term it happened under.
  auto accumulate = [&result](auto&& make_term, double weight, double& slot, const char* name) {
    Tensor<S> term;
    try {
      term = make_term();
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string("total_loss: term ") + name + ": " + e.what());
    }
    const double v = double(term.value());
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("total_loss: term ") + name + ": non-finite value");
    slot = v;
    Tensor<S> weighted = scale(term, S(weight));
    result.total = result.total.defined() ? add(result.total, weighted) : weighted;
  };
  if (w.dn > 0) {
    if (!out.depth_normal.defined())
      throw std::invalid_argument("total_loss: weight on depth_normal but output is absent");
    accumulate([&] { return depth_loss(out.depth_normal, tgt.dense, tgt.dense_mask, K); }, w.dn,
               result.l_dn, "L_d_n");
  }
  if (w.dc > 0) {
    if (!out.depth_color.defined())
      throw std::invalid_argument("total_loss: weight on depth_color but output is absent");
    accumulate([&] { return depth_loss(out.depth_color, tgt.dense, tgt.dense_mask, K); }, w.dc,
               result.l_dc, "L_d_c");
  }
  if (w.dfinal > 0) {
    if (!out.depth_final.defined())
      throw std::invalid_argument("total_loss: weight on depth_final but output is absent");
    accumulate([&] { return depth_loss(out.depth_final, tgt.dense, tgt.dense_mask, K); }, w.dfinal,
               result.l_dfinal, "L_d_final");
  }
  if (w.n > 0) {
    if (!out.normals.defined())
      throw std::invalid_argument("total_loss: weight on normals but output is absent");
    accumulate([&] { return cosine_loss(out.normals, tgt.normals, tgt.normals_mask); }, w.n,
               result.l_n, "L_n");
  }
  return result;
}

template LossBreakdown<float> total_loss<float>(const ModelOutput<float>&,
                                                const BatchTargets<float>&, const LossWeights&,
                                                const CameraIntrinsics&);
template LossBreakdown<double> total_loss<double>(const ModelOutput<double>&,
                                                  const BatchTargets<double>&, const LossWeights&,
                                                  const CameraIntrinsics&);

namespace {

LossWeights effective_weights(const ModelConfig& cfg, LossWeights w) {
  if (!cfg.use_normal_pathway) {
    w.dn = 0;
    w.n = 0;
  }
  return w;
}

void atomic_save(DepthModel<float>& model, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  model.save(tmp);
  std::filesystem::rename(tmp, path);
}

}  // namespace

double validation_rmse_mm(DepthModel<float>& model, const std::vector<Sample>& val,
                          int batch_size) {
  if (val.empty()) throw std::invalid_argument("validation_rmse_mm: no validation samples");
  double acc = 0;
  int64_t n = 0;
  for (size_t i = 0; i < val.size(); i += size_t(batch_size)) {
    std::vector<const Sample*> chunk;
    for (size_t j = i; j < std::min(val.size(), i + size_t(batch_size)); ++j)
      chunk.push_back(&val[j]);
    auto [in, tgt] = make_batch<float>(chunk);
    ModelOutput<float> out = model.forward(in);
    const float* p = out.depth_final.data();
    const float* g = tgt.dense.data();
    const float* m = tgt.dense_mask.data();
    const int64_t count = tgt.dense.numel();
    for (int64_t k = 0; k < count; ++k) {
      if (m[k] != 1.0f) continue;
      const double d = (double(p[k]) - double(g[k])) * 1000.0;
      acc += d * d;
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("validation_rmse_mm: no valid ground-truth pixels");
  return std::sqrt(acc / double(n));
}

ModelOutput<float> predict_outputs(DepthModel<float>& model, const Sample& s) {
  auto [in, tgt] = make_batch<float>({&s});
  (void)tgt;
  return model.forward(in);
}

DepthMap predict_depth(DepthModel<float>& model, const Sample& s) {
  ModelOutput<float> out = predict_outputs(model, s);
  DepthMap d(s.height(), s.width());
  const float* p = out.depth_final.data();
  for (int r = 0; r < d.height(); ++r)
    for (int c = 0; c < d.width(); ++c) {
      d.values(r, c) = p[int64_t(r) * d.width() + c];
      d.valid(r, c) = true;
    }
  return d;
}

DepthModel<float> load_model(const std::filesystem::path& checkpoint) {
  const std::filesystem::path cfg_path = checkpoint.parent_path() / "model.config";
  if (!std::filesystem::exists(cfg_path))
    throw std::runtime_error("load_model: missing config sidecar " + cfg_path.string());
  ModelConfig cfg = model_config_from_text(read_text_file(cfg_path));
  DepthModel<float> model(cfg);
  model.load(checkpoint);
  return model;
}

TrainResult run_schedule(DepthModel<float>& model, const Dataset& data, const Schedule& sched,
                         const TrainOptions& opt) {
  if (data.train.empty()) throw std::invalid_argument("run_schedule: no training samples");
  if (data.val.empty()) throw std::invalid_argument("run_schedule: no validation samples");
  if (sched.batch_size < 1) throw std::invalid_argument("run_schedule: batch_size must be >= 1");
  if (sched.lr_halve_every < 1)
    throw std::invalid_argument("run_schedule: lr_halve_every must be >= 1");
  std::filesystem::create_directories(opt.out_dir);

  TrainResult result;
  result.best_checkpoint = opt.out_dir / "best.nfck";
  result.log_csv = opt.out_dir / "train_log.csv";
  result.best_val_rmse_mm = std::numeric_limits<double>::infinity();

  std::ofstream log(result.log_csv);
  if (!log) throw std::runtime_error("run_schedule: cannot write " + result.log_csv.string());
  log << "epoch, stage, lr, L_total, L_n, L_d_c, L_d_n, L_d_final, val_rmse_mm\n";

  auto& params = model.parameters();
  AdamState<float> adam;
  adam.init(params);

  const CameraIntrinsics& K = data.camera;
  write_text_file(opt.out_dir / "model.config",
                  model_config_to_text(model.config(), opt.variant));

  int epoch = 0;
  bool saved_any = false;
  for (size_t stage_idx = 0; stage_idx < sched.stages.size(); ++stage_idx) {
    const TrainStage& stage = sched.stages[stage_idx];
    const LossWeights w = effective_weights(model.config(), stage.weights);
    if (w.dn == 0 && w.dc == 0 && w.dfinal == 0 && w.n == 0) {
      epoch += stage.epochs;  // keeps the lr schedule aligned across variants
      continue;
    }
    const ForwardNeeds needs = ForwardNeeds::for_weights(w.dn, w.dc, w.dfinal, w.n);

    for (int se = 0; se < stage.epochs; ++se, ++epoch) {
      const double lr = sched.lr0 * std::pow(0.5, double(epoch / sched.lr_halve_every));

      std::vector<size_t> order(data.train.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      auto rng = make_rng(opt.seed, 1000 + uint64_t(epoch));
      std::shuffle(order.begin(), order.end(), rng);

      double sum_total = 0, sum_n = 0, sum_dc = 0, sum_dn = 0, sum_df = 0;
      int steps = 0;
      for (size_t i = 0; i < order.size(); i += size_t(sched.batch_size)) {
        std::vector<const Sample*> chunk;
        for (size_t j = i; j < std::min(order.size(), i + size_t(sched.batch_size)); ++j)
          chunk.push_back(&data.train[order[j]]);
        try {
          auto [in, tgt] = make_batch<float>(chunk);
          ModelOutput<float> out = model.forward(in, needs);
          LossBreakdown<float> loss = total_loss(out, tgt, w, K);
          loss.total.backward();
          adam_step(params, adam, float(lr));
          for (auto& p : params) p.clear_grad();
          sum_total += double(loss.total.value());
          sum_n += loss.l_n;
          sum_dc += loss.l_dc;
          sum_dn += loss.l_dn;
          sum_df += loss.l_dfinal;
          ++steps;
        } catch (const std::runtime_error& e) {
          result.aborted = true;
          result.abort_reason = strprintf("epoch %d: %s", epoch, e.what());
          log << "# aborted: " << result.abort_reason << "\n";
          if (!saved_any) atomic_save(model, result.best_checkpoint);
          return result;
        }
      }

      const double val_rmse = validation_rmse_mm(model, data.val, sched.batch_size);
      const double inv = steps > 0 ? 1.0 / steps : 0.0;
      log << strprintf("%d, %zu, %.10g, %.10g, %.10g, %.10g, %.10g, %.10g, %.10g\n", epoch,
                       stage_idx + 1, lr, sum_total * inv, sum_n * inv, sum_dc * inv,
                       sum_dn * inv, sum_df * inv, val_rmse);
      log.flush();
      if (opt.verbose)
        std::fprintf(stderr, "epoch %d stage %zu loss %.6f val %.1f mm\n", epoch, stage_idx + 1,
                     sum_total * inv, val_rmse);

      if (val_rmse < result.best_val_rmse_mm) {
        result.best_val_rmse_mm = val_rmse;
        result.best_epoch = epoch;
        atomic_save(model, result.best_checkpoint);
        saved_any = true;
      }
    }
  }
  if (!saved_any) atomic_save(model, result.best_checkpoint);
  return result;
}

}  // namespace normfill
