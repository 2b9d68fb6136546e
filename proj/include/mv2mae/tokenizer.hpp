#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mv2mae/clip.hpp"
#include "mv2mae/tensor.hpp"

namespace mv2mae {

/// Clip geometry and the t x h x w cube size used to cut it into tokens.
struct PatchConfig {
  std::size_t t_patch = 2;
  std::size_t h_patch = 16;
  std::size_t w_patch = 16;
  std::size_t frames = 16;
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t channels = 3;

  /// Throws ConfigError unless every patch size divides its clip extent.
  void validate() const;
  std::size_t grid_t() const { return frames / t_patch; }
  std::size_t grid_h() const { return height / h_patch; }
  std::size_t grid_w() const { return width / w_patch; }
  std::size_t num_tokens() const { return grid_t() * grid_h() * grid_w(); }
  std::size_t patch_dim() const { return t_patch * h_patch * w_patch * channels; }
};

/// Tokens of one view for a batch. `token_index[b][j]` is the flattened patch
/// index of row j of item b.
template <class T>
struct TokenBatch {
  Tensor<T> tokens;  // [B, n, d]
  std::vector<std::vector<std::size_t>> token_index;
  std::vector<std::uint32_t> view_id;
  bool is_encoded = false;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t count() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
};

/// [N, P] rows of patch pixels. Patches are ordered time-major, then height,
/// then width; inside a patch the order is (dt, dy, dx, channel).
template <class T>
Tensor<T> patchify(const ClipTensor& clip, const PatchConfig& cfg);

/// Stacks patchify over a batch: [B, N, P].
template <class T>
Tensor<T> patchify_batch(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg);

/// Exact inverse of patchify. Accepts [N, P] or [1, N, P].
template <class T>
ClipTensor unpatchify(const Tensor<T>& patches, const PatchConfig& cfg);

/// Maps [0,1] pixels to the model input range: (x - 0.5) / 0.5.
template <class T>
Tensor<T> standardize_pixels(const Tensor<T>& patches);

/// Per-row (x - mean) / (population std + eps). Works on any rank; rows are
/// the last dimension.
template <class T>
Tensor<T> normalize_patch_targets(const Tensor<T>& patches, T eps = T(1e-6));

/// Fixed 1D sinusoid over the flattened token index: [N, d].
template <class T>
Tensor<T> sinusoidal_pos_embed(std::size_t n, std::size_t d);

/// tokens = patches * weight + bias + pos[token_index], all N tokens kept.
/// patches: [B, N, P]; weight: [P, d]; bias: [d]; pos: [N, d].
template <class T>
TokenBatch<T> embed_tokens(const Tensor<T>& patches, const Tensor<T>& weight, const Tensor<T>& bias,
                           const Tensor<T>& pos);

}  // namespace mv2mae
