#include "mv2mae/viz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "mv2mae/tensor.hpp"

namespace mv2mae::viz {

Image Image::filled(std::size_t h, std::size_t w, float v) {
  Image img;
  img.height = h;
  img.width = w;
  img.rgb.assign(h * w * 3, v);
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || maxval != 255) throw std::runtime_error("not a P6 image: " + path.string());
  in.get();
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error("truncated image: " + path.string());
  auto img = Image::filled(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

std::array<float, 3> colormap(double v) {
  static constexpr float stops[4][3] = {{0, 0, 1}, {0, 1, 1}, {1, 1, 0}, {1, 0, 0}};
  const double x = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0) * 3.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(x), 2);
  const auto a = static_cast<float>(x - static_cast<double>(i));
  return {stops[i][0] + a * (stops[i + 1][0] - stops[i][0]), stops[i][1] + a * (stops[i + 1][1] - stops[i][1]),
          stops[i][2] + a * (stops[i + 1][2] - stops[i][2])};
}

Image frame_image(const ClipTensor& clip, std::size_t t) {
  auto img = Image::filled(clip.height, clip.width);
  for (std::size_t y = 0; y < clip.height; ++y)
    for (std::size_t x = 0; x < clip.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.px(y, x)[c] = clip.at(std::min(c, clip.channels - 1), t, y, x);
  return img;
}

Image overlay(const Image& frame, std::span<const double> heat) {
  if (heat.size() != frame.height * frame.width) throw DimensionError("overlay: heat map size mismatch");
  Image out = frame;
  for (std::size_t y = 0; y < frame.height; ++y)
    for (std::size_t x = 0; x < frame.width; ++x) {
      const auto c = colormap(heat[y * frame.width + x]);
      for (std::size_t k = 0; k < 3; ++k) out.px(y, x)[k] = 0.5f * frame.px(y, x)[k] + 0.5f * c[k];
    }
  return out;
}

std::vector<double> token_heat(const PatchConfig& cfg, std::span<const double> token_values, std::size_t t) {
  if (token_values.size() != cfg.num_tokens()) throw DimensionError("token_heat: expected one value per token");
  std::vector<double> heat(cfg.height * cfg.width);
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w();
  for (std::size_t y = 0; y < cfg.height; ++y)
    for (std::size_t x = 0; x < cfg.width; ++x) {
      heat[y * cfg.width + x] = token_values[((t / cfg.t_patch) * gh + y / cfg.h_patch) * gw + x / cfg.w_patch];
    }
  return heat;
}

Image tile(const std::vector<std::vector<Image>>& rows) {
  if (rows.empty() || rows.front().empty()) return {};
  const std::size_t h = rows.front().front().height, w = rows.front().front().width;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  auto out = Image::filled(rows.size() * (h + 1) - 1, cols * (w + 1) - 1, 1.0f);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& img = rows[r][c];
      if (img.height != h || img.width != w) throw DimensionError("tile: images differ in size");
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(img.px(y, 0), w * 3, out.px(r * (h + 1) + y, c * (w + 1)));
    }
  return out;
}

}  // namespace mv2mae::viz
