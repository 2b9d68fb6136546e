#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mv2mae/clip.hpp"
#include "mv2mae/masking.hpp"
#include "mv2mae/model.hpp"
#include "mv2mae/tensor.hpp"
#include "mv2mae/tokenizer.hpp"

namespace mv2mae {

/// One scalar weight per token, softmax-normalized per clip.
template <class T>
struct MotionWeights {
  Tensor<T> weights;  // [B, N]
  double temperature = 60;
};

/// Per-token L2 norm of absolute frame differences. The first difference is
/// repeated for frame 0; frames are taken on the standardized model-input
/// scale (x - 0.5) / 0.5.
std::vector<double> frame_difference_norms(const ClipTensor& clip, const PatchConfig& cfg);

/// softmax(norms / temperature) over all tokens.
std::vector<double> softmax_weights(std::span<const double> norms, double temperature);

template <class T>
MotionWeights<T> motion_weights(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg,
                                double temperature);

/// Every token weighted 1/N, as if all patches moved equally.
template <class T>
MotionWeights<T> uniform_weights(std::size_t batch, std::size_t num_tokens);

/// Mean over items of (1/|masked|) * sum over masked tokens of the per-patch
/// mean squared error. targets/preds: [B, N, P].
template <class T>
Tensor<T> masked_mse(const Tensor<T>& targets, const Tensor<T>& preds, const std::vector<MaskPlan>& plans);

/// As masked_mse with each masked token's error scaled by its raw weight.
template <class T>
Tensor<T> motion_weighted_mse(const Tensor<T>& targets, const Tensor<T>& preds, const std::vector<MaskPlan>& plans,
                              const MotionWeights<T>& weights);

/// Label-smoothed NLL: 1 - s on the label, s / (K - 1) on every other class.
template <class T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<std::uint32_t>& labels, double smoothing);

/// Inputs of one view for one step.
template <class T>
struct ViewBatch {
  Tensor<T> inputs;   // [B, N, P] standardized pixels
  Tensor<T> targets;  // [B, N, P] per-patch normalized pixels
  MotionWeights<T> weights;
  std::vector<MaskPlan> plans;
};

/// Builds a view batch from clips: patchify, standardize, normalize targets,
/// motion weights (uniform when `use_motion` is false).
template <class T>
ViewBatch<T> make_view_batch(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg,
                             std::vector<MaskPlan> plans, bool use_motion, double temperature);

struct ObjectiveConfig {
  double lambda_cross = 1.0;
  /// Multiply weights by N so a static clip matches the unweighted scale.
  bool rescale_weights = false;
  /// Also reconstruct the source view from the target view.
  bool symmetric = false;
};

template <class T>
struct LossReport {
  Tensor<T> total;
  double self_sv = 0;
  double self_tv = 0;
  double cross_tv = 0;
  double ce = 0;
  std::vector<std::size_t> masked_counts;  // sv, tv
};

/// total = self_sv + self_tv + lambda * cross_tv. Extra source views only feed
/// the cross-view decoder's keys and values.
template <class T>
LossReport<T> pretrain_loss(const Model<T>& model, const ViewBatch<T>& sv, const ViewBatch<T>& tv,
                            const std::vector<ViewBatch<T>>& extra_sources, const ObjectiveConfig& cfg);

}  // namespace mv2mae
