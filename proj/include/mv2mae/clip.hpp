#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mv2mae {

/// A C x T x H x W video clip (row-major, channel outermost) with provenance.
struct ClipTensor {
  std::size_t channels = 3;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::uint32_t view_id = 0;
  std::uint32_t sample_id = 0;
  std::uint32_t label = 0;

  static ClipTensor zeros(std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    ClipTensor clip;
    clip.channels = c;
    clip.frames = t;
    clip.height = h;
    clip.width = w;
    clip.pixels.assign(c * t * h * w, 0.0f);
    return clip;
  }

  std::size_t index(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return ((c * frames + t) * height + y) * width + x;
  }
  float& at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) { return pixels[index(c, t, y, x)]; }
  float at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const { return pixels[index(c, t, y, x)]; }
};

}  // namespace mv2mae
