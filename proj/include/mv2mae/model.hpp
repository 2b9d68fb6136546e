#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mv2mae/masking.hpp"
#include "mv2mae/tensor.hpp"
#include "mv2mae/tokenizer.hpp"

namespace mv2mae {

struct ModelConfig {
  std::size_t d_enc = 384;
  std::size_t enc_depth = 12;
  std::size_t enc_heads = 6;
  std::size_t enc_mlp = 1536;
  std::size_t d_dec = 192;
  std::size_t dec_depth = 4;
  std::size_t dec_heads = 3;
  std::size_t dec_mlp = 768;
  PatchConfig patch;
  std::size_t n_classes = 0;  // 0 = no classifier head
  double drop_path_rate = 0;

  void validate() const;
  /// ViT-S/16 encoder with the 192-wide, 4-block decoders on 16x128x128 clips.
  static ModelConfig vit_small();
};

/// Which parameter groups to create.
enum class ParamSet : std::uint8_t { pretrain, finetune, all };

/// Named tensors of one model. Names are stable and sorted, which fixes the
/// checkpoint order.
template <class T>
class ModelParams {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& operator[](const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void set(const std::string& name, Tensor<T> t) { tensors_[name] = std::move(t); }
  void erase_prefix(const std::string& prefix);
  std::size_t count() const;
  Map& tensors() { return tensors_; }
  const Map& tensors() const { return tensors_; }
  void zero_grad();
  void set_requires_grad(bool v);

 private:
  Map tensors_;
};

/// Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains,
/// N(0, 0.02^2) mask token.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed, ParamSet set);

/// Number of scalars in the encoder (token embedder + blocks).
std::size_t encoder_param_count(const ModelConfig& cfg);

/// Post-softmax cross-attention maps recorded during a forward pass.
template <class T>
struct AttentionRecorder {
  struct Map {
    std::size_t batch = 0, heads = 0, queries = 0, keys = 0;
    std::vector<T> weights;  // [B, heads, queries, keys]
  };
  std::vector<Map> layers;
};

/// Post-softmax row for (layer, head, query) of batch item `item`.
template <class T>
std::vector<T> attention_map_extract(const AttentionRecorder<T>* recorder, std::size_t layer, std::size_t head,
                                     std::size_t query, std::size_t item = 0);

struct ForwardOptions {
  bool train = false;
  /// Drop-path draws are keyed by (drop_seed, block, item).
  std::uint64_t drop_seed = 0;
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, ModelParams<T>* params);

  const ModelConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return *params_; }

  /// Patch-embeds [B, N, P] standardized patches with the encoder positions.
  TokenBatch<T> tokenize(const Tensor<T>& patches) const;

  TokenBatch<T> encoder_forward(const TokenBatch<T>& visible, const ForwardOptions& opts = {}) const;

  /// Projects encoded tokens to decoder width, fills masked slots with the
  /// mask token, restores token order and adds decoder positions: [B, N, d_dec].
  TokenBatch<T> assemble_decoder_input(const TokenBatch<T>& encoded, const std::vector<MaskPlan>& plans) const;

  /// Projected encoder tokens plus their decoder positions: [B, n, d_dec].
  Tensor<T> source_tokens(const TokenBatch<T>& encoded) const;

  /// [B, N, P] per-patch pixel predictions.
  Tensor<T> self_view_decoder(const TokenBatch<T>& full) const;

  /// Reconstructs the target view; keys/values are the visible tokens of all
  /// source views concatenated along the token axis.
  Tensor<T> cross_view_decoder(const TokenBatch<T>& full_target, const std::vector<TokenBatch<T>>& sources,
                               AttentionRecorder<T>* recorder = nullptr) const;

  /// Mean-pooled, normalized features -> [B, n_classes].
  Tensor<T> classifier_forward(const TokenBatch<T>& encoded) const;

 private:
  Tensor<T> linear(const Tensor<T>& x, const std::string& name) const;
  Tensor<T> norm(const Tensor<T>& x, const std::string& name) const;
  Tensor<T> attention(const Tensor<T>& q_in, const Tensor<T>& kv_in, const std::string& name, std::size_t heads,
                      typename AttentionRecorder<T>::Map* record) const;
  Tensor<T> mlp(const Tensor<T>& x, const std::string& name) const;
  Tensor<T> drop_path(const Tensor<T>& branch, std::size_t block, const ForwardOptions& opts) const;
  Tensor<T> self_block(const Tensor<T>& x, const std::string& name, std::size_t heads, std::size_t block,
                       const ForwardOptions& opts) const;

  ModelConfig cfg_;
  ModelParams<T>* params_;
  Tensor<T> pos_enc_;
  Tensor<T> pos_dec_;
};

}  // namespace mv2mae
