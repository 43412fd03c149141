// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csmap/tensor.hpp"

namespace csmap {

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// [H,W,C] values in [0,1] to 8 bits by rounding; values outside are clamped.
Image8 to_image8(const Tensor<float>& hwc);

/// Binary PGM (P5) for gray, PPM (P6) for RGB.
std::string encode_pnm(const Image8& image);
/// Truecolor or grayscale PNG, single IDAT, no filtering.
std::string encode_png(const Image8& image);

/// Chooses the encoder by extension: .pgm, .ppm, .png.
void write_image(const Image8& image, const std::filesystem::path& path);

/// Reads back a binary PGM/PPM written by encode_pnm.
Image8 read_pnm(const std::filesystem::path& path);

}  // namespace csmap
