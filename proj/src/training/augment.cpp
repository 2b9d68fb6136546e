#include "mv2mae/augment.hpp"

#include <algorithm>
#include <cmath>

#include "mv2mae/errors.hpp"
#include "mv2mae/tensor.hpp"

namespace mv2mae {

CropParams full_crop(std::size_t height, std::size_t width) {
  return {0, 0, static_cast<double>(width), static_cast<double>(height), false};
}

CropParams random_resized_crop(KeyedRng& rng, std::size_t height, std::size_t width, double scale_min) {
  if (!(scale_min > 0 && scale_min <= 1)) throw ConfigError("crop_scale_min", "must lie in (0, 1]");
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = H * W * rng.uniform(scale_min, 1.0);
    const double ratio = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double w = std::round(std::sqrt(area * ratio));
    const double h = std::round(std::sqrt(area / ratio));
    if (w >= 1 && h >= 1 && w <= W && h <= H) {
      const double x0 = std::floor(rng.uniform() * (W - w + 1));
      const double y0 = std::floor(rng.uniform() * (H - h + 1));
      return {x0, y0, w, h, false};
    }
  }
  return full_crop(height, width);
}

std::vector<CropParams> test_crops(std::size_t height, std::size_t width, std::size_t n) {
  const auto full = full_crop(height, width);
  if (n == 1) return {full};
  if (n == 2) return {full, {full.x0, full.y0, full.w, full.h, true}};
  if (n != 10) throw ConfigError("n_crops", "must be 1, 2 or 10, got " + std::to_string(n));
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  const double cw = std::round(0.875 * W), ch = std::round(0.875 * H);
  const double xs[5] = {std::floor((W - cw) / 2), 0, W - cw, 0, W - cw};
  const double ys[5] = {std::floor((H - ch) / 2), 0, 0, H - ch, H - ch};
  std::vector<CropParams> out;
  for (bool flip : {false, true})
    for (int i = 0; i < 5; ++i) out.push_back({xs[i], ys[i], cw, ch, flip});
  return out;
}

ClipTensor crop_clip(const ClipTensor& clip, const CropParams& crop, std::size_t start, std::size_t frames,
                     std::size_t out_height, std::size_t out_width) {
  if (start + frames > clip.frames) throw DimensionError("crop_clip: temporal window exceeds clip length");
  ClipTensor out = ClipTensor::zeros(clip.channels, frames, out_height, out_width);
  out.view_id = clip.view_id;
  out.sample_id = clip.sample_id;
  out.label = clip.label;
  const bool identity = !crop.flip && crop.x0 == 0 && crop.y0 == 0 &&
                        crop.w == static_cast<double>(clip.width) && crop.h == static_cast<double>(clip.height) &&
                        out_width == clip.width && out_height == clip.height;
  // Pixel-center sampling, clamped at the border.
  const double sx = crop.w / static_cast<double>(out_width), sy = crop.h / static_cast<double>(out_height);
  for (std::size_t c = 0; c < clip.channels; ++c)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t y = 0; y < out_height; ++y)
        for (std::size_t x = 0; x < out_width; ++x) {
          if (identity) {
            out.at(c, t, y, x) = clip.at(c, start + t, y, x);
            continue;
          }
          const std::size_t xo = crop.flip ? out_width - 1 - x : x;
          const double fx = std::clamp(crop.x0 + (static_cast<double>(xo) + 0.5) * sx - 0.5, 0.0,
                                       static_cast<double>(clip.width - 1));
          const double fy = std::clamp(crop.y0 + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                       static_cast<double>(clip.height - 1));
          const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
          const std::size_t x1 = std::min(x0 + 1, clip.width - 1), y1 = std::min(y0 + 1, clip.height - 1);
          const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
          const auto p = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(clip.at(c, start + t, yy, xx)); };
          const double v = (1 - ay) * ((1 - ax) * p(y0, x0) + ax * p(y0, x1)) + ay * ((1 - ax) * p(y1, x0) + ax * p(y1, x1));
          out.at(c, t, y, x) = static_cast<float>(v);
        }
  return out;
}

std::vector<std::size_t> temporal_starts(std::size_t total, std::size_t frames, std::size_t n) {
  if (n == 0) throw ConfigError("n_clips", "must be at least 1");
  if (frames > total) throw DimensionError("temporal window longer than the clip");
  const std::size_t span = total - frames;
  if (n == 1) return {span / 2};
  std::vector<std::size_t> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = (k * span + (n - 1) / 2) / (n - 1);
  return out;
}

}  // namespace mv2mae
