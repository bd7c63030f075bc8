#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "normfill/model.hpp"
#include "normfill/synthdata.hpp"

namespace normfill {

/// Term weights for the composite objective
///   L = dn * L_d(depth_normal) + dc * L_d(depth_color)
///     + dfinal * L_d(depth_final) + n * L_n(normals).
struct LossWeights {
  double dn = 0, dc = 0, dfinal = 0, n = 0;
};

struct TrainStage {
  LossWeights weights;
  int epochs = 0;
};

struct Schedule {
  std::vector<TrainStage> stages;
  double lr0 = 1e-3;
  int lr_halve_every = 5;  // lr(e) = lr0 * 0.5^floor(e / halve), e global
  int batch_size = 2;

  /// Normals warmup, then both depth branches, then everything with fusion.
  static Schedule standard(const std::vector<int>& epochs = {5, 5, 10});
};

template <typename S>
struct BatchTargets {
  Tensor<S> dense;         // [B,1,H,W] gt depth in meters, 0 where invalid
  Tensor<S> dense_mask;    // [B,1,H,W] 0/1
  Tensor<S> normals;       // [B,3,H,W] unit gt normals, 0 where invalid
  Tensor<S> normals_mask;  // [B,1,H,W] 0/1
};

template <typename S>
std::pair<BatchInputs<S>, BatchTargets<S>> make_batch(const std::vector<const Sample*>& batch);

extern template std::pair<BatchInputs<float>, BatchTargets<float>> make_batch<float>(
    const std::vector<const Sample*>&);
extern template std::pair<BatchInputs<double>, BatchTargets<double>> make_batch<double>(
    const std::vector<const Sample*>&);

/// Masked squared depth error plus 0.5 times a surface-normal agreement term
/// between normals derived from predicted and ground-truth depth. The normal
/// term covers pixels where both derivations are valid and drops out when no
/// such pixel exists.
template <typename S>
Tensor<S> depth_loss(const Tensor<S>& pred, const Tensor<S>& gt, const Tensor<S>& gt_mask,
                     const CameraIntrinsics& K);

extern template Tensor<float> depth_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                                const Tensor<float>&, const CameraIntrinsics&);
extern template Tensor<double> depth_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&, const CameraIntrinsics&);

template <typename S>
struct LossBreakdown {
  Tensor<S> total;  // undefined when every weight is zero
  double l_n = 0, l_dc = 0, l_dn = 0, l_dfinal = 0;
};

/// Weighted sum of the active terms. Terms with zero weight are not
/// evaluated; a positive weight whose model output is missing is an error.
template <typename S>
LossBreakdown<S> total_loss(const ModelOutput<S>& out, const BatchTargets<S>& tgt,
                            const LossWeights& w, const CameraIntrinsics& K);

extern template LossBreakdown<float> total_loss<float>(const ModelOutput<float>&,
                                                       const BatchTargets<float>&,
                                                       const LossWeights&,
                                                       const CameraIntrinsics&);
extern template LossBreakdown<double> total_loss<double>(const ModelOutput<double>&,
                                                         const BatchTargets<double>&,
                                                         const LossWeights&,
                                                         const CameraIntrinsics&);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::string variant = "custom";  // recorded in the config sidecar
  uint64_t seed = 0;
  bool verbose = false;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path log_csv;
  double best_val_rmse_mm = 0;
  int best_epoch = -1;
  bool aborted = false;
  std::string abort_reason;
};

/// Runs the staged schedule with Adam, batch shuffling seeded per epoch, a
/// per-epoch CSV log and an atomically written best-validation checkpoint.
/// Stages whose weights all vanish under the model's ablation flags are
/// skipped. A non-finite loss aborts, keeping the last good checkpoint.
TrainResult run_schedule(DepthModel<float>& model, const Dataset& data, const Schedule& sched,
                         const TrainOptions& opt);

/// Root mean square error in millimeters of depth_final over ground-truth
/// valid pixels, pooled across all given samples.
double validation_rmse_mm(DepthModel<float>& model, const std::vector<Sample>& val,
                          int batch_size);

/// Single-sample inference; the fused depth as an everywhere-valid map.
DepthMap predict_depth(DepthModel<float>& model, const Sample& s);

/// Full model outputs for one sample, for rendering and diagnostics.
ModelOutput<float> predict_outputs(DepthModel<float>& model, const Sample& s);

/// Rebuilds the model from the config sidecar next to the checkpoint file
/// and loads the weights.
DepthModel<float> load_model(const std::filesystem::path& checkpoint);

}  // namespace normfill
