#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "mv2mae/clip.hpp"
#include "mv2mae/tokenizer.hpp"

namespace mv2mae::viz {

/// Interleaved RGB in [0, 1], row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;

  static Image filled(std::size_t h, std::size_t w, float v = 0.0f);
  float* px(std::size_t y, std::size_t x) { return &rgb[(y * width + x) * 3]; }
  const float* px(std::size_t y, std::size_t x) const { return &rgb[(y * width + x) * 3]; }
};

/// Binary P6 with maxval 255; values are clamped and rounded.
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

/// Blue -> cyan -> yellow -> red for v in [0, 1].
std::array<float, 3> colormap(double v);

/// One frame of a clip; grayscale clips are replicated to RGB.
Image frame_image(const ClipTensor& clip, std::size_t t);

/// 0.5 * frame + 0.5 * colormap(heat), heat given per pixel in [0, 1].
Image overlay(const Image& frame, std::span<const double> heat);

/// Per-pixel values of frame t, each pixel taking the value of its token.
std::vector<double> token_heat(const PatchConfig& cfg, std::span<const double> token_values, std::size_t t);

/// Lays out a grid of equally sized images with a 1 pixel white gutter.
Image tile(const std::vector<std::vector<Image>>& rows);

}  // namespace mv2mae::viz
