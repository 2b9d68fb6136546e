#pragma once

#include <cstddef>
#include <vector>

#include "mv2mae/clip.hpp"
#include "mv2mae/rng.hpp"

namespace mv2mae {

/// A spatial window in source pixels plus an optional mirror, resized to the
/// output size with bilinear interpolation.
struct CropParams {
  double x0 = 0, y0 = 0;
  double w = 0, h = 0;
  bool flip = false;
};

/// The identity crop of a height x width frame.
CropParams full_crop(std::size_t height, std::size_t width);

/// Random-resized crop: area fraction in [scale_min, 1], aspect ratio
/// log-uniform in [3/4, 4/3]; falls back to the full frame after 10 rejected
/// draws.
CropParams random_resized_crop(KeyedRng& rng, std::size_t height, std::size_t width, double scale_min);

/// Center plus four corners with side `scale` of the frame, each optionally
/// mirrored: n in {1, 2, 10}.
std::vector<CropParams> test_crops(std::size_t height, std::size_t width, std::size_t n);

/// Frames [start, start + frames) of `clip`, cropped and resized to
/// out_height x out_width. Metadata is copied.
ClipTensor crop_clip(const ClipTensor& clip, const CropParams& crop, std::size_t start, std::size_t frames,
                     std::size_t out_height, std::size_t out_width);

/// n evenly spaced window starts over a clip of `total` frames.
std::vector<std::size_t> temporal_starts(std::size_t total, std::size_t frames, std::size_t n);

}  // namespace mv2mae
