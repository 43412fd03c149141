// SPDX-License-Identifier: Apache-2.0
#include "csmap/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "csmap/error.hpp"

namespace csmap {
namespace {

void check_image(const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw UsageError("images must have 1 or 3 channels, got " + std::to_string(img.channels));
  if (img.pixels.size() != img.width * img.height * img.channels)
    throw DataError("image buffer size does not match " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + "x" + std::to_string(img.channels));
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

Image8 to_image8(const Tensor<float>& hwc) {
  if (hwc.rank() != 3) throw DataError("to_image8: expected [H,W,C], got " + to_string(hwc.shape()));
  Image8 img{hwc.dim(1), hwc.dim(0), hwc.dim(2), std::vector<std::uint8_t>(hwc.size())};
  for (std::size_t i = 0; i < hwc.size(); ++i) {
    const float v = hwc[i];
    if (std::isnan(v)) throw NumericalError("to_image8: NaN pixel at index " + std::to_string(i));
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  }
  check_image(img);
  return img;
}

std::string encode_pnm(const Image8& img) {
  check_image(img);
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

std::string encode_png(const Image8& img) {
  check_image(img);
  const std::size_t stride = img.width * img.channels;
  std::string raw;
  raw.reserve((stride + 1) * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(img.pixels.data() + y * stride), stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK)
    throw IoError("zlib compression failed");
  packed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);        // gray or truecolor
  ihdr.append(3, '\0');                             // compression, filter, interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", packed);
  put_chunk(out, "IEND", "");
  return out;
}

void write_image(const Image8& image, const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  std::string bytes;
  if (ext == ".png") {
    bytes = encode_png(image);
  } else if (ext == ".pgm" || ext == ".ppm") {
    if ((ext == ".pgm") != (image.channels == 1))
      throw UsageError(path.string() + ": " + ext + " cannot hold a " + std::to_string(image.channels) +
                       "-channel image");
    bytes = encode_pnm(image);
  } else {
    throw UsageError("unsupported image extension '" + ext + "' (use .png, .pgm or .ppm)");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255 || !in)
    throw DataError(path.string() + ": not an 8-bit binary PGM/PPM");
  in.get();
  Image8 img{w, h, magic == "P5" ? std::size_t{1} : std::size_t{3}, {}};
  img.pixels.resize(w * h * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw DataError(path.string() + ": pixel data is truncated");
  return img;
}

}  // namespace csmap
