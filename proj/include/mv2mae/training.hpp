#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mv2mae/checkpoint.hpp"
#include "mv2mae/masking.hpp"
#include "mv2mae/model.hpp"
#include "mv2mae/objective.hpp"
#include "mv2mae/synthdata.hpp"

namespace mv2mae {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class T>
struct OptimState {
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
  std::uint64_t step = 0;
};

/// False for biases, LayerNorm gains and the mask token.
bool applies_weight_decay(const std::string& name);

/// One bias-corrected AdamW update of every parameter that requires a gradient
/// and has one. `lr_scale` multiplies lr per parameter name.
template <class T>
void adamw_step(ModelParams<T>& params, OptimState<T>& state, const AdamWConfig& cfg, double lr,
                const std::function<double(const std::string&)>& lr_scale = {});

struct Schedule {
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  double warmup_epochs = 0;
  double total_epochs = 1;
  std::size_t steps_per_epoch = 1;

  void validate() const;
};

/// Linear warmup from 0, then cosine decay to min_lr; min_lr past the end.
double lr_at(const Schedule& s, std::size_t step);

/// base * decay^(depth - layer).
double layerwise_lr(double base, std::size_t layer, std::size_t depth, double decay);

/// 0 for the patch embedder, i + 1 for encoder block i, enc_depth + 1 for
/// everything else (the classifier).
std::size_t layer_id(const std::string& name, std::size_t enc_depth);

struct TrainConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  double warmup_epochs = 20;
  AdamWConfig adamw;

  double rho = 0.7;
  MaskStrategy mask = MaskStrategy::random;
  double temperature = 60;
  bool motion_weighting = true;
  ObjectiveConfig objective;
  std::size_t n_source_views = 1;

  bool crop = true;
  double crop_scale_min = 0.5;
  bool flip = true;  // fine-tuning only

  double layer_decay = 0.9;
  double label_smoothing = 0.1;
  bool linear_probe = false;

  /// Also write checkpoint_epoch<E>.mv2c every this many epochs (0 = never).
  std::size_t checkpoint_every = 0;

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();
  /// Throws ConfigError naming the first bad key.
  void validate() const;
  Schedule schedule(std::size_t n_samples) const;
  std::size_t steps_per_epoch(std::size_t n_samples) const;
};

struct PretrainRow {
  std::size_t step = 0;
  double lr = 0;
  double total = 0, self_sv = 0, self_tv = 0, cross_tv = 0;
};

struct PretrainResult {
  ModelParams<float> params;
  OptimState<float> opt;
  std::vector<PretrainRow> rows;
  std::vector<double> epoch_mean_total;
};

/// Artifact locations; an empty out_dir writes nothing.
struct RunPaths {
  std::filesystem::path out_dir;
  std::filesystem::path resume;
};

/// Multi-view masked pre-training. Writes metrics.tsv and checkpoint.mv2c
/// (parameters plus optimizer state) into out_dir.
PretrainResult pretrain(const synth::Dataset& data, const TrainConfig& cfg, const RunPaths& paths = {});

struct CrossViewReport {
  double model_mse = 0;  // cross-view decoder, masked target patches
  double copy_mse = 0;   // co-located source patch copied as the prediction
};

/// Unweighted masked MSE of cross-view reconstruction (view 0 -> view 1) in
/// normalized target space, against the copy-source-patch baseline.
CrossViewReport cross_view_reconstruction(const synth::Dataset& data, ModelParams<float>& params,
                                          const TrainConfig& cfg, std::uint64_t mask_epoch);

struct FinetuneRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double acc = 0;
};

struct FinetuneResult {
  ModelParams<float> params;
  std::vector<FinetuneRow> rows;
};

/// Classifier training on all tokens of one random view per sample. Encoder
/// tensors come from `pretrained` when given, otherwise from a fresh init.
FinetuneResult finetune(const synth::Dataset& data, const TensorMap<float>* pretrained, const TrainConfig& cfg,
                        const RunPaths& paths = {});

struct EvalConfig {
  std::size_t n_clips = 1;
  std::size_t n_crops = 1;
  /// Views to fuse; empty means all.
  std::vector<std::uint32_t> views;
};

struct EvalResult {
  std::vector<std::uint32_t> sample_ids;
  std::vector<std::uint32_t> labels;
  std::vector<std::vector<std::vector<double>>> view_logits;  // [sample][view][class]
  std::vector<std::vector<double>> logits;                   // fused
  std::vector<std::uint32_t> predictions;
  double accuracy = 0;
};

EvalResult evaluate(const synth::Dataset& data, ModelParams<float>& params, const ModelConfig& model,
                    const EvalConfig& cfg);

/// Index of the largest value; ties go to the lowest index.
std::uint32_t argmax(std::span<const double> values);

struct FusedPredictions {
  std::vector<std::vector<double>> logits;
  std::vector<std::uint32_t> predictions;
};

/// Arithmetic mean over views, then argmax. Input: [sample][view][class].
FusedPredictions late_fuse(const std::vector<std::vector<std::vector<double>>>& per_sample_views);

/// sample_id, label, prediction, then one column per class (fused logits).
void write_logits_tsv(const std::filesystem::path& path, const EvalResult& result);

/// Locale-independent shortest round-trip formatting.
std::string format_number(double v);

}  // namespace mv2mae
