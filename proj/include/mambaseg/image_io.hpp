#pragma once

#include "mambaseg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mambaseg {

/// 8-bit raster, interleaved rows (HWC).
struct Image {
  Index height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(Index y, Index x, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(Index y, Index x, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

/// Decodes PNG or JPEG (detected from the file signature) to 8-bit gray,
/// RGB or RGBA. 16-bit PNGs are reduced to 8 bits; palettes are expanded.
/// Throws IoError naming the path on any failure.
Image read_image(const std::filesystem::path& path);

/// Writes an 8-bit PNG with 1, 3 or 4 channels.
void write_png(const std::filesystem::path& path, const Image& image);

/// Planar float resampling of a [C,H,W] buffer. Bilinear uses half-pixel
/// centers with edge clamping; nearest picks floor((i + 0.5) * in / out).
std::vector<float> resize_bilinear(const std::vector<float>& src, Index channels, Index in_h, Index in_w, Index out_h,
                                   Index out_w);
std::vector<float> resize_nearest(const std::vector<float>& src, Index channels, Index in_h, Index in_w, Index out_h,
                                  Index out_w);

}  // namespace mambaseg
