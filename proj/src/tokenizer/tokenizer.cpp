#include "mv2mae/tokenizer.hpp"

#include <cmath>
#include <numeric>

#include "mv2mae/errors.hpp"

namespace mv2mae {

void PatchConfig::validate() const {
  if (t_patch == 0 || h_patch == 0 || w_patch == 0) throw ConfigError("patch", "patch sizes must be positive");
  if (frames % t_patch != 0) throw ConfigError("frames", "temporal patch size must divide the frame count");
  if (height % h_patch != 0) throw ConfigError("height", "patch height must divide the clip height");
  if (width % w_patch != 0) throw ConfigError("width", "patch width must divide the clip width");
  if (channels == 0) throw ConfigError("channels", "must be positive");
  if (num_tokens() == 0) throw ConfigError("patch", "clip yields no tokens");
}

namespace {

void check_clip(const ClipTensor& clip, const PatchConfig& cfg) {
  if (clip.channels != cfg.channels || clip.frames != cfg.frames || clip.height != cfg.height ||
      clip.width != cfg.width) {
    throw DimensionError("patchify: clip " + shape_str({clip.channels, clip.frames, clip.height, clip.width}) +
                         " does not match patch config " +
                         shape_str({cfg.channels, cfg.frames, cfg.height, cfg.width}));
  }
}

// Calls f(token, offset_in_patch, clip_flat_index) for every clip pixel.
template <class F>
void for_each_patch_pixel(const PatchConfig& cfg, F&& f) {
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w();
  const std::size_t C = cfg.channels;
  std::size_t token = 0;
  for (std::size_t gt = 0; gt < cfg.grid_t(); ++gt)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx, ++token) {
        std::size_t off = 0;
        for (std::size_t dt = 0; dt < cfg.t_patch; ++dt)
          for (std::size_t dy = 0; dy < cfg.h_patch; ++dy)
            for (std::size_t dx = 0; dx < cfg.w_patch; ++dx)
              for (std::size_t c = 0; c < C; ++c, ++off) {
                const std::size_t t = gt * cfg.t_patch + dt;
                const std::size_t y = gy * cfg.h_patch + dy;
                const std::size_t x = gx * cfg.w_patch + dx;
                f(token, off, ((c * cfg.frames + t) * cfg.height + y) * cfg.width + x);
              }
      }
}

}  // namespace

template <class T>
Tensor<T> patchify(const ClipTensor& clip, const PatchConfig& cfg) {
  cfg.validate();
  check_clip(clip, cfg);
  const std::size_t P = cfg.patch_dim();
  std::vector<T> out(cfg.num_tokens() * P);
  for_each_patch_pixel(cfg, [&](std::size_t tok, std::size_t off, std::size_t src) {
    out[tok * P + off] = static_cast<T>(clip.pixels[src]);
  });
  return Tensor<T>({cfg.num_tokens(), P}, std::move(out));
}

template <class T>
Tensor<T> patchify_batch(const std::vector<const ClipTensor*>& clips, const PatchConfig& cfg) {
  cfg.validate();
  const std::size_t N = cfg.num_tokens(), P = cfg.patch_dim();
  std::vector<T> out(clips.size() * N * P);
  for (std::size_t b = 0; b < clips.size(); ++b) {
    check_clip(*clips[b], cfg);
    T* dst = out.data() + b * N * P;
    for_each_patch_pixel(cfg, [&](std::size_t tok, std::size_t off, std::size_t src) {
      dst[tok * P + off] = static_cast<T>(clips[b]->pixels[src]);
    });
  }
  return Tensor<T>({clips.size(), N, P}, std::move(out));
}

template <class T>
ClipTensor unpatchify(const Tensor<T>& patches, const PatchConfig& cfg) {
  cfg.validate();
  const std::size_t N = cfg.num_tokens(), P = cfg.patch_dim();
  const bool ok = (patches.rank() == 2 && patches.dim(0) == N && patches.dim(1) == P) ||
                  (patches.rank() == 3 && patches.dim(0) == 1 && patches.dim(1) == N && patches.dim(2) == P);
  if (!ok) {
    throw DimensionError("unpatchify: expected [" + std::to_string(N) + "," + std::to_string(P) + "], got " +
                         shape_str(patches.shape()));
  }
  auto clip = ClipTensor::zeros(cfg.channels, cfg.frames, cfg.height, cfg.width);
  const auto src = patches.data();
  for_each_patch_pixel(cfg, [&](std::size_t tok, std::size_t off, std::size_t dst) {
    clip.pixels[dst] = static_cast<float>(src[tok * P + off]);
  });
  return clip;
}

template <class T>
Tensor<T> standardize_pixels(const Tensor<T>& patches) {
  std::vector<T> out(patches.data().begin(), patches.data().end());
  for (auto& v : out) v = (v - T(0.5)) / T(0.5);
  return Tensor<T>(patches.shape(), std::move(out));
}

template <class T>
Tensor<T> normalize_patch_targets(const Tensor<T>& patches, T eps) {
  if (!(eps > 0)) throw ConfigError("eps", "target normalization eps must be positive");
  const std::size_t d = patches.dim(-1);
  const std::size_t rows = patches.numel() / d;
  std::vector<T> out(patches.data().begin(), patches.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    const T sd = std::sqrt(var / static_cast<T>(d));
    for (std::size_t c = 0; c < d; ++c) row[c] = (row[c] - mu) / (sd + eps);
  }
  return Tensor<T>(patches.shape(), std::move(out));
}

template <class T>
Tensor<T> sinusoidal_pos_embed(std::size_t n, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("d", "sinusoidal embedding width must be even, got " + std::to_string(d));
  std::vector<T> pe(n * d);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      pe[p * d + 2 * i] = static_cast<T>(std::sin(angle));
      pe[p * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  return Tensor<T>({n, d}, std::move(pe));
}

template <class T>
TokenBatch<T> embed_tokens(const Tensor<T>& patches, const Tensor<T>& weight, const Tensor<T>& bias,
                           const Tensor<T>& pos) {
  if (patches.rank() != 3) throw DimensionError("embed_tokens: patches must be [B,N,P], got " + shape_str(patches.shape()));
  const std::size_t B = patches.dim(0), N = patches.dim(1);
  if (pos.rank() != 2 || pos.dim(0) != N || pos.dim(1) != weight.dim(-1)) {
    throw DimensionError("embed_tokens: positional table " + shape_str(pos.shape()) + " does not match " +
                         std::to_string(N) + " tokens of width " + std::to_string(weight.dim(-1)));
  }
  TokenBatch<T> out;
  out.tokens = add(add(matmul(patches, weight), bias), pos);
  std::vector<std::size_t> all(N);
  std::iota(all.begin(), all.end(), std::size_t{0});
  out.token_index.assign(B, all);
  out.view_id.assign(B, 0);
  return out;
}

#define MV2MAE_INSTANTIATE(T)                                                                              \
  template Tensor<T> patchify<T>(const ClipTensor&, const PatchConfig&);                                 \
  template Tensor<T> patchify_batch<T>(const std::vector<const ClipTensor*>&, const PatchConfig&);       \
  template ClipTensor unpatchify<T>(const Tensor<T>&, const PatchConfig&);                               \
  template Tensor<T> standardize_pixels<T>(const Tensor<T>&);                                            \
  template Tensor<T> normalize_patch_targets<T>(const Tensor<T>&, T);                                    \
  template Tensor<T> sinusoidal_pos_embed<T>(std::size_t, std::size_t);                                  \
  template TokenBatch<T> embed_tokens<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

MV2MAE_INSTANTIATE(float)
MV2MAE_INSTANTIATE(double)

}  // namespace mv2mae
