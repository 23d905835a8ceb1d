#pragma once

// Minimal 8-bit PNG reader/writer over zlib. Handles the critical chunks and
// non-interlaced gray / RGB / RGBA images, which covers the NeRF-synthetic
// datasets and everything this project writes. The writer emits filter-0
// scanlines compressed at a fixed level, so output bytes are stable for
// identical input.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nerfmark/image.hpp"
#include "nerfmark/tensor.hpp"

namespace nerfmark {
namespace detail {

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32_be(out, crc);
}

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace detail

// Writes a (C,H,W) float image in [0,1]; C must be 1 (gray), 3 (RGB) or
// 4 (RGBA). Values are quantized with round-half-up after clamping.
inline void write_image(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3 && image.dim(0) != 4))
    detail::fail_op("write_image", "expects (1|3|4,H,W), got " + detail::shape_str(image.shape()));
  const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * ch));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        raw.push_back(quantize_u8(image[static_cast<std::size_t>(c) * plane +
                                        static_cast<std::size_t>(y) * w + x]));
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_image: deflate failed for " + path);
  compressed.resize(bound);

  std::vector<std::uint8_t> file;
  const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  file.insert(file.end(), sig, sig + 8);
  std::vector<std::uint8_t> ihdr;
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(ch == 1 ? 0 : (ch == 3 ? 2 : 6));  // gray / truecolor / truecolor+alpha
  ihdr.push_back(0), ihdr.push_back(0), ihdr.push_back(0);  // deflate, adaptive, no interlace
  detail::png_chunk(file, "IHDR", ihdr);
  detail::png_chunk(file, "IDAT", compressed);
  detail::png_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_image: cannot open " + path);
  out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!out) throw std::runtime_error("write_image: short write to " + path);
}

// Reads an 8-bit non-interlaced gray/RGB/RGBA PNG as a (C,H,W) float image
// in [0,1]. Alpha is preserved; compositing is the caller's policy.
inline Tensor read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image: cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw std::runtime_error("read_image: not a PNG file: " + path);

  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_end = false;
  while (pos + 8 <= file.size() && !saw_end) {
    const std::uint32_t len = detail::get_u32_be(file.data() + pos);
    if (pos + 12 + len > file.size())
      throw std::runtime_error("read_image: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
    const std::uint8_t* data = file.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("read_image: bad IHDR in " + path);
      width = static_cast<int>(detail::get_u32_be(data));
      height = static_cast<int>(detail::get_u32_be(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8)
        throw std::runtime_error("read_image: only 8-bit PNGs supported: " + path);
      if (interlace != 0)
        throw std::runtime_error("read_image: interlaced PNGs not supported: " + path);
      if (color == 0)
        channels = 1;
      else if (color == 2)
        channels = 3;
      else if (color == 6)
        channels = 4;
      else
        throw std::runtime_error("read_image: unsupported color type " + std::to_string(color) +
                                 ": " + path);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0 || channels == 0 || idat.empty())
    throw std::runtime_error("read_image: missing IHDR/IDAT in " + path);

  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(height) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("read_image: inflate failed for " + path);

  // Undo per-row filters in place into `pixels`.
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(height) * stride);
  const int bpp = channels;
  for (int y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    std::uint8_t* dst = pixels.data() + static_cast<std::size_t>(y) * stride;
    const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default:
          throw std::runtime_error("read_image: bad filter byte in " + path);
      }
      dst[i] = static_cast<std::uint8_t>(v);
    }
  }

  Tensor out({channels, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        out[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * width + x] =
            dequantize_u8(pixels[static_cast<std::size_t>(y) * stride +
                                 static_cast<std::size_t>(x) * channels + c]);
  return out;
}

}  // namespace nerfmark
