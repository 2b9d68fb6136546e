#include "mv2mae/objective.hpp"

#include <algorithm>
#include <cmath>

#include "mv2mae/errors.hpp"

namespace mv2mae {

std::vector<double> frame_difference_norms(const ClipTensor& clip, const PatchConfig& cfg) {
  cfg.validate();
  if (clip.frames < 2) throw ConfigError("frames", "motion weights need at least 2 frames");
  if (clip.frames != cfg.frames || clip.height != cfg.height || clip.width != cfg.width ||
      clip.channels != cfg.channels) {
    throw DimensionError("frame_difference_norms: clip does not match patch config");
  }
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w();
  std::vector<double> sq(cfg.num_tokens(), 0.0);
  for (std::size_t c = 0; c < clip.channels; ++c)
    for (std::size_t t = 0; t < clip.frames; ++t) {
      // Frame 0 reuses the first difference.
      const std::size_t t1 = t == 0 ? 1 : t;
      for (std::size_t y = 0; y < clip.height; ++y)
        for (std::size_t x = 0; x < clip.width; ++x) {
          const double d = 2.0 * (static_cast<double>(clip.at(c, t1, y, x)) - clip.at(c, t1 - 1, y, x));
          const std::size_t tok = ((t / cfg.t_patch) * gh + y / cfg.h_patch) * gw + x / cfg.w_patch;
          sq[tok] += d * d;
        }
    }
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

std::vector<double> softmax_weights(std::span<const double> norms, double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature", "must be positive, got " + std::to_string(temperature));
  if (norms.empty()) return {};
  const double mx = *std::max_element(norms.begin(), norms.end()) / temperature;
  std::vector<double> w(norms.size());
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] = std::exp(norms[i] / temperature - mx));
  for (auto& v : w) v /= s;
  return w;
}

template <class T>
MotionWeights<T> motion_weights(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg,
                                double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature", "must be positive, got " + std::to_string(temperature));
  const std::size_t N = cfg.num_tokens();
  std::vector<T> w;
  w.reserve(clips.size() * N);
  for (const auto* clip : clips) {
    const auto ws = softmax_weights(frame_difference_norms(*clip, cfg), temperature);
    for (auto v : ws) w.push_back(static_cast<T>(v));
  }
  return {Tensor<T>({clips.size(), N}, std::move(w)), temperature};
}

template <class T>
MotionWeights<T> uniform_weights(std::size_t batch, std::size_t num_tokens) {
  return {Tensor<T>::full({batch, num_tokens}, T(1) / static_cast<T>(num_tokens)),
          std::numeric_limits<double>::infinity()};
}

namespace {

template <class T>
void check_pair(const Tensor<T>& targets, const Tensor<T>& preds, const std::vector<MaskPlan>& plans) {
  if (targets.shape() != preds.shape() || targets.rank() != 3) {
    throw DimensionError("reconstruction loss: targets " + shape_str(targets.shape()) + " vs predictions " +
                         shape_str(preds.shape()));
  }
  if (plans.size() != targets.dim(0)) throw DimensionError("reconstruction loss: one mask plan per item required");
  for (const auto& p : plans) {
    if (p.num_tokens != targets.dim(1)) throw DimensionError("reconstruction loss: plan/token count mismatch");
    if (p.masked.empty()) throw DimensionError("reconstruction loss: no masked tokens");
  }
}

// sum_b sum_i coef[b, i] * mse[b, i] / B, coef built by the caller.
template <class T>
Tensor<T> weighted_patch_error(const Tensor<T>& targets, const Tensor<T>& preds, std::vector<T> coef) {
  const std::size_t B = targets.dim(0), N = targets.dim(1);
  auto per_patch = mean(square(sub(preds, targets)), 2);  // [B, N]
  return scale(sum(mul(per_patch, Tensor<T>({B, N}, std::move(coef)))), T(1) / static_cast<T>(B));
}

}  // namespace

template <class T>
Tensor<T> masked_mse(const Tensor<T>& targets, const Tensor<T>& preds, const std::vector<MaskPlan>& plans) {
  check_pair(targets, preds, plans);
  const std::size_t N = targets.dim(1);
  std::vector<T> coef(plans.size() * N, T(0));
  for (std::size_t b = 0; b < plans.size(); ++b)
    for (auto i : plans[b].masked) coef[b * N + i] = T(1) / static_cast<T>(plans[b].masked.size());
  return weighted_patch_error(targets, preds, std::move(coef));
}

template <class T>
Tensor<T> motion_weighted_mse(const Tensor<T>& targets, const Tensor<T>& preds, const std::vector<MaskPlan>& plans,
                              const MotionWeights<T>& weights) {
  check_pair(targets, preds, plans);
  const std::size_t N = targets.dim(1);
  if (weights.weights.shape() != Shape{plans.size(), N}) {
    throw DimensionError("motion_weighted_mse: weights " + shape_str(weights.weights.shape()) + " do not match " +
                         shape_str({plans.size(), N}));
  }
  const auto w = weights.weights.data();
  std::vector<T> coef(plans.size() * N, T(0));
  for (std::size_t b = 0; b < plans.size(); ++b)
    for (auto i : plans[b].masked) coef[b * N + i] = w[b * N + i] / static_cast<T>(plans[b].masked.size());
  return weighted_patch_error(targets, preds, std::move(coef));
}

template <class T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<std::uint32_t>& labels, double smoothing) {
  if (!(smoothing >= 0 && smoothing < 1)) throw ConfigError("label_smoothing", "must lie in [0, 1)");
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy_smoothed: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (K < 2 && smoothing > 0) throw ConfigError("label_smoothing", "needs at least 2 classes");
  const T off = K > 1 ? static_cast<T>(smoothing / static_cast<double>(K - 1)) : T(0);
  std::vector<T> q(B * K, off);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw std::out_of_range("cross_entropy_smoothed: label " + std::to_string(labels[b]) + " >= " + std::to_string(K));
    q[b * K + labels[b]] = static_cast<T>(1 - smoothing);
  }
  return scale(sum(mul(log_softmax(logits, -1), Tensor<T>({B, K}, std::move(q)))), T(-1) / static_cast<T>(B));
}

template <class T>
ViewBatch<T> make_view_batch(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg,
                             std::vector<MaskPlan> plans, bool use_motion, double temperature) {
  ViewBatch<T> vb;
  const auto raw = patchify_batch<T>(clips, cfg);
  vb.inputs = standardize_pixels(raw);
  vb.targets = normalize_patch_targets(raw);
  vb.weights = use_motion ? motion_weights<T>(clips, cfg, temperature) : uniform_weights<T>(clips.size(), cfg.num_tokens());
  vb.plans = std::move(plans);
  return vb;
}

template <class T>
LossReport<T> pretrain_loss(const Model<T>& model, const ViewBatch<T>& sv, const ViewBatch<T>& tv,
                            const std::vector<ViewBatch<T>>& extra_sources, const ObjectiveConfig& cfg) {
  if (cfg.lambda_cross < 0) throw ConfigError("lambda_cross", "must be nonnegative");
  auto weights_of = [&](const ViewBatch<T>& v) {
    if (!cfg.rescale_weights) return v.weights;
    return MotionWeights<T>{scale(v.weights.weights, static_cast<T>(v.weights.weights.dim(1))), v.weights.temperature};
  };
  auto encode = [&](const ViewBatch<T>& v) {
    return model.encoder_forward(split_tokens(model.tokenize(v.inputs), v.plans).visible);
  };
  const auto enc_sv = encode(sv);
  const auto enc_tv = encode(tv);
  const auto full_sv = model.assemble_decoder_input(enc_sv, sv.plans);
  const auto full_tv = model.assemble_decoder_input(enc_tv, tv.plans);

  auto l_sv = motion_weighted_mse(sv.targets, model.self_view_decoder(full_sv), sv.plans, weights_of(sv));
  auto l_tv = motion_weighted_mse(tv.targets, model.self_view_decoder(full_tv), tv.plans, weights_of(tv));
  LossReport<T> rep;
  rep.self_sv = static_cast<double>(l_sv.item());
  rep.self_tv = static_cast<double>(l_tv.item());
  rep.masked_counts = {sv.plans.front().masked.size(), tv.plans.front().masked.size()};
  rep.total = add(l_sv, l_tv);
  if (cfg.lambda_cross == 0) return rep;

  std::vector<TokenBatch<T>> sources{enc_sv};
  for (const auto& extra : extra_sources) sources.push_back(encode(extra));
  auto l_x = motion_weighted_mse(tv.targets, model.cross_view_decoder(full_tv, sources), tv.plans, weights_of(tv));
  if (cfg.symmetric) {
    auto l_rev = motion_weighted_mse(sv.targets, model.cross_view_decoder(full_sv, {enc_tv}), sv.plans, weights_of(sv));
    l_x = scale(add(l_x, l_rev), T(0.5));
  }
  rep.cross_tv = static_cast<double>(l_x.item());
  rep.total = add(rep.total, scale(l_x, static_cast<T>(cfg.lambda_cross)));
  return rep;
}

#define MV2MAE_INSTANTIATE(T)                                                                                   \
  template MotionWeights<T> motion_weights<T>(const std::vector<const ClipTensor*>&, const PatchConfig&, double); \
  template MotionWeights<T> uniform_weights<T>(std::size_t, std::size_t);                                     \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&, const std::vector<MaskPlan>&);            \
  template Tensor<T> motion_weighted_mse(const Tensor<T>&, const Tensor<T>&, const std::vector<MaskPlan>&,     \
                                         const MotionWeights<T>&);                                            \
  template Tensor<T> cross_entropy_smoothed(const Tensor<T>&, const std::vector<std::uint32_t>&, double);     \
  template ViewBatch<T> make_view_batch<T>(const std::vector<const ClipTensor*>&, const PatchConfig&,         \
                                           std::vector<MaskPlan>, bool, double);                              \
  template LossReport<T> pretrain_loss(const Model<T>&, const ViewBatch<T>&, const ViewBatch<T>&,             \
                                       const std::vector<ViewBatch<T>>&, const ObjectiveConfig&);

MV2MAE_INSTANTIATE(float)
MV2MAE_INSTANTIATE(double)

}  // namespace mv2mae
