#include "mv2mae/model.hpp"

#include <cmath>

#include "mv2mae/errors.hpp"
#include "mv2mae/rng.hpp"

namespace mv2mae {

void ModelConfig::validate() const {
  patch.validate();
  if (d_enc == 0 || d_dec == 0) throw ConfigError("d_enc", "embedding widths must be positive");
  if (enc_heads == 0 || d_enc % enc_heads != 0) throw ConfigError("enc_heads", "must divide d_enc");
  if (dec_heads == 0 || d_dec % dec_heads != 0) throw ConfigError("dec_heads", "must divide d_dec");
  if (d_enc % 2 != 0) throw ConfigError("d_enc", "must be even for sinusoidal positions");
  if (d_dec % 2 != 0) throw ConfigError("d_dec", "must be even for sinusoidal positions");
  if (enc_mlp == 0 || dec_mlp == 0) throw ConfigError("enc_mlp", "MLP widths must be positive");
  if (drop_path_rate < 0 || drop_path_rate >= 1) throw ConfigError("drop_path", "must lie in [0, 1)");
}

ModelConfig ModelConfig::vit_small() {
  ModelConfig c;
  c.patch = PatchConfig{2, 16, 16, 16, 128, 128, 3};
  return c;
}

template <class T>
Tensor<T>& ModelParams<T>::operator[](const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <class T>
const Tensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <class T>
void ModelParams<T>::erase_prefix(const std::string& prefix) {
  for (auto it = tensors_.begin(); it != tensors_.end();) {
    it = it->first.rfind(prefix, 0) == 0 ? tensors_.erase(it) : std::next(it);
  }
}

template <class T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

template <class T>
void ModelParams<T>::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

template <class T>
void ModelParams<T>::set_requires_grad(bool v) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(v);
}

namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

template <class T>
struct Initializer {
  ModelParams<T>& params;
  std::uint64_t seed;

  void weight(const std::string& name, std::size_t in, std::size_t out) {
    KeyedRng rng{seed, name_hash(name)};
    std::vector<T> w(in * out);
    for (auto& v : w) v = static_cast<T>(rng.truncated_normal(0.02));
    params.set(name, Tensor<T>({in, out}, std::move(w), true));
  }
  void constant(const std::string& name, std::size_t n, T value) {
    params.set(name, Tensor<T>::full({n}, value, true));
  }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    weight(name + ".weight", in, out);
    constant(name + ".bias", out, T(0));
  }
  void norm(const std::string& name, std::size_t d) {
    constant(name + ".gain", d, T(1));
    constant(name + ".bias", d, T(0));
  }
  void attention(const std::string& name, std::size_t d) {
    for (const char* p : {".q", ".k", ".v", ".o"}) linear(name + p, d, d);
  }
  void mlp(const std::string& name, std::size_t d, std::size_t hidden) {
    linear(name + ".fc1", d, hidden);
    linear(name + ".fc2", hidden, d);
  }
  void self_block(const std::string& name, std::size_t d, std::size_t hidden) {
    norm(name + ".norm1", d);
    attention(name + ".attn", d);
    norm(name + ".norm2", d);
    mlp(name + ".mlp", d, hidden);
  }
};

}  // namespace

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed, ParamSet set) {
  cfg.validate();
  ModelParams<T> params;
  Initializer<T> init{params, seed};
  init.linear("embed", cfg.patch.patch_dim(), cfg.d_enc);
  for (std::size_t i = 0; i < cfg.enc_depth; ++i) init.self_block("enc." + std::to_string(i), cfg.d_enc, cfg.enc_mlp);
  if (set != ParamSet::finetune) {
    init.linear("proj", cfg.d_enc, cfg.d_dec);
    {
      KeyedRng rng{seed, name_hash("mask_token")};
      std::vector<T> m(cfg.d_dec);
      for (auto& v : m) v = static_cast<T>(0.02 * rng.normal());
      params.set("mask_token", Tensor<T>({cfg.d_dec}, std::move(m), true));
    }
    for (std::size_t i = 0; i < cfg.dec_depth; ++i) {
      init.self_block("self_dec." + std::to_string(i), cfg.d_dec, cfg.dec_mlp);
      const std::string x = "cross_dec." + std::to_string(i);
      init.norm(x + ".xnorm_q", cfg.d_dec);
      init.norm(x + ".xnorm_kv", cfg.d_dec);
      init.attention(x + ".xattn", cfg.d_dec);
      init.self_block(x, cfg.d_dec, cfg.dec_mlp);
    }
    init.norm("self_dec.norm", cfg.d_dec);
    init.norm("cross_dec.norm", cfg.d_dec);
    init.linear("head", cfg.d_dec, cfg.patch.patch_dim());
  }
  if (set != ParamSet::pretrain) {
    if (cfg.n_classes == 0) throw ConfigError("n_classes", "classifier requested without a class count");
    init.norm("cls.norm", cfg.d_enc);
    init.linear("cls", cfg.d_enc, cfg.n_classes);
  }
  return params;
}

std::size_t encoder_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_enc, h = cfg.enc_mlp;
  const std::size_t block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  return cfg.patch.patch_dim() * d + d + cfg.enc_depth * block;
}

template <class T>
std::vector<T> attention_map_extract(const AttentionRecorder<T>* recorder, std::size_t layer, std::size_t head,
                                     std::size_t query, std::size_t item) {
  if (recorder == nullptr) throw std::logic_error("attention maps were not recorded for this forward pass");
  const auto& m = recorder->layers.at(layer);
  if (head >= m.heads || query >= m.queries || item >= m.batch) throw std::out_of_range("attention map index");
  const auto off = ((item * m.heads + head) * m.queries + query) * m.keys;
  return std::vector<T>(m.weights.begin() + static_cast<std::ptrdiff_t>(off),
                        m.weights.begin() + static_cast<std::ptrdiff_t>(off + m.keys));
}

template <class T>
Model<T>::Model(ModelConfig cfg, ModelParams<T>* params) : cfg_(std::move(cfg)), params_(params) {
  cfg_.validate();
  pos_enc_ = sinusoidal_pos_embed<T>(cfg_.patch.num_tokens(), cfg_.d_enc);
  pos_dec_ = sinusoidal_pos_embed<T>(cfg_.patch.num_tokens(), cfg_.d_dec);
}

template <class T>
Tensor<T> Model<T>::linear(const Tensor<T>& x, const std::string& name) const {
  return add(matmul(x, params_->at(name + ".weight")), params_->at(name + ".bias"));
}

template <class T>
Tensor<T> Model<T>::norm(const Tensor<T>& x, const std::string& name) const {
  return layer_norm(x, params_->at(name + ".gain"), params_->at(name + ".bias"), T(1e-6));
}

template <class T>
Tensor<T> Model<T>::attention(const Tensor<T>& q_in, const Tensor<T>& kv_in, const std::string& name,
                              std::size_t heads, typename AttentionRecorder<T>::Map* record) const {
  const std::size_t B = q_in.dim(0), n = q_in.dim(1), m = kv_in.dim(1), d = q_in.dim(2);
  const std::size_t dh = d / heads;
  auto q = permute(reshape(linear(q_in, name + ".q"), {B, n, heads, dh}), {0, 2, 1, 3});
  auto kt = permute(reshape(linear(kv_in, name + ".k"), {B, m, heads, dh}), {0, 2, 3, 1});
  auto v = permute(reshape(linear(kv_in, name + ".v"), {B, m, heads, dh}), {0, 2, 1, 3});
  auto attn = softmax(scale(matmul(q, kt), T(1) / std::sqrt(static_cast<T>(dh))), -1);
  if (record != nullptr) {
    record->batch = B;
    record->heads = heads;
    record->queries = n;
    record->keys = m;
    record->weights.assign(attn.data().begin(), attn.data().end());
  }
  auto out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, n, d});
  return linear(out, name + ".o");
}

template <class T>
Tensor<T> Model<T>::mlp(const Tensor<T>& x, const std::string& name) const {
  return linear(gelu(linear(x, name + ".fc1")), name + ".fc2");
}

template <class T>
Tensor<T> Model<T>::drop_path(const Tensor<T>& branch, std::size_t block, const ForwardOptions& opts) const {
  if (!opts.train || cfg_.drop_path_rate <= 0) return branch;
  // Linear ramp from 0 at the first block to the full rate at the last.
  const double rate = cfg_.enc_depth > 1 ? cfg_.drop_path_rate * static_cast<double>(block) /
                                               static_cast<double>(cfg_.enc_depth - 1)
                                         : cfg_.drop_path_rate;
  if (rate <= 0) return branch;
  const std::size_t B = branch.dim(0);
  const double keep = 1 - rate;
  std::vector<T> mask(B);
  for (std::size_t b = 0; b < B; ++b) {
    KeyedRng rng{opts.drop_seed, block, b};
    mask[b] = rng.uniform() < keep ? static_cast<T>(1 / keep) : T(0);
  }
  return mul(branch, Tensor<T>({B, 1, 1}, std::move(mask)));
}

template <class T>
Tensor<T> Model<T>::self_block(const Tensor<T>& x, const std::string& name, std::size_t heads, std::size_t block,
                               const ForwardOptions& opts) const {
  auto h = norm(x, name + ".norm1");
  auto y = add(x, drop_path(attention(h, h, name + ".attn", heads, nullptr), block, opts));
  return add(y, drop_path(mlp(norm(y, name + ".norm2"), name + ".mlp"), block, opts));
}

template <class T>
TokenBatch<T> Model<T>::tokenize(const Tensor<T>& patches) const {
  return embed_tokens(patches, params_->at("embed.weight"), params_->at("embed.bias"), pos_enc_);
}

template <class T>
TokenBatch<T> Model<T>::encoder_forward(const TokenBatch<T>& visible, const ForwardOptions& opts) const {
  if (visible.tokens.rank() != 3 || visible.width() != cfg_.d_enc) {
    throw DimensionError("encoder_forward: expected [B,n," + std::to_string(cfg_.d_enc) + "] tokens, got " +
                         shape_str(visible.tokens.shape()));
  }
  if (visible.count() == 0) throw DimensionError("encoder_forward: no tokens to encode");
  TokenBatch<T> out = visible;
  Tensor<T> x = visible.tokens;
  for (std::size_t i = 0; i < cfg_.enc_depth; ++i) x = self_block(x, "enc." + std::to_string(i), cfg_.enc_heads, i, opts);
  out.tokens = x;
  out.is_encoded = true;
  return out;
}

template <class T>
TokenBatch<T> Model<T>::assemble_decoder_input(const TokenBatch<T>& encoded, const std::vector<MaskPlan>& plans) const {
  const std::size_t N = cfg_.patch.num_tokens();
  if (plans.size() != encoded.batch()) throw DimensionError("assemble_decoder_input: one plan per item required");
  for (std::size_t b = 0; b < plans.size(); ++b) {
    if (plans[b].num_tokens != N || encoded.token_index[b] != plans[b].visible) {
      throw DimensionError("assemble_decoder_input: encoded tokens do not cover the plan's visible set");
    }
  }
  TokenBatch<T> out;
  auto filled = scatter_rows(linear(encoded.tokens, "proj"), params_->at("mask_token"), encoded.token_index, N);
  out.tokens = add(filled, pos_dec_);
  std::vector<std::size_t> all(N);
  for (std::size_t i = 0; i < N; ++i) all[i] = i;
  out.token_index.assign(encoded.batch(), all);
  out.view_id = encoded.view_id;
  out.is_encoded = false;
  return out;
}

template <class T>
Tensor<T> Model<T>::source_tokens(const TokenBatch<T>& encoded) const {
  const std::size_t B = encoded.batch(), n = encoded.count(), d = cfg_.d_dec;
  std::vector<T> pe(B * n * d);
  const auto table = pos_dec_.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(table.data() + encoded.token_index[b][j] * d, d, pe.data() + (b * n + j) * d);
  return add(linear(encoded.tokens, "proj"), Tensor<T>({B, n, d}, std::move(pe)));
}

template <class T>
Tensor<T> Model<T>::self_view_decoder(const TokenBatch<T>& full) const {
  if (full.count() != cfg_.patch.num_tokens()) throw DimensionError("self_view_decoder: expected all tokens");
  Tensor<T> x = full.tokens;
  for (std::size_t i = 0; i < cfg_.dec_depth; ++i) x = self_block(x, "self_dec." + std::to_string(i), cfg_.dec_heads, i, {});
  return linear(norm(x, "self_dec.norm"), "head");
}

template <class T>
Tensor<T> Model<T>::cross_view_decoder(const TokenBatch<T>& full_target, const std::vector<TokenBatch<T>>& sources,
                                       AttentionRecorder<T>* recorder) const {
  if (full_target.count() != cfg_.patch.num_tokens()) throw DimensionError("cross_view_decoder: expected all target tokens");
  std::vector<Tensor<T>> parts;
  for (const auto& s : sources)
    if (s.count() > 0) parts.push_back(source_tokens(s));
  if (parts.empty()) throw DimensionError("cross_view_decoder: no visible source tokens");
  const Tensor<T> src = parts.size() == 1 ? parts.front() : concat(parts, 1);
  if (recorder != nullptr) recorder->layers.assign(cfg_.dec_depth, {});
  Tensor<T> x = full_target.tokens;
  for (std::size_t i = 0; i < cfg_.dec_depth; ++i) {
    const std::string name = "cross_dec." + std::to_string(i);
    auto q = norm(x, name + ".xnorm_q");
    auto kv = norm(src, name + ".xnorm_kv");
    x = add(x, attention(q, kv, name + ".xattn", cfg_.dec_heads, recorder ? &recorder->layers[i] : nullptr));
    x = self_block(x, name, cfg_.dec_heads, i, {});
  }
  return linear(norm(x, "cross_dec.norm"), "head");
}

template <class T>
Tensor<T> Model<T>::classifier_forward(const TokenBatch<T>& encoded) const {
  if (cfg_.n_classes == 0) throw ConfigError("n_classes", "classifier head needs a class count");
  return linear(norm(mean(encoded.tokens, 1), "cls.norm"), "cls");
}

template class ModelParams<float>;
template class ModelParams<double>;
template class Model<float>;
template class Model<double>;
template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t, ParamSet);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t, ParamSet);
template std::vector<float> attention_map_extract(const AttentionRecorder<float>*, std::size_t, std::size_t,
                                                  std::size_t, std::size_t);
template std::vector<double> attention_map_extract(const AttentionRecorder<double>*, std::size_t, std::size_t,
                                                   std::size_t, std::size_t);

}  // namespace mv2mae
