#pragma once

// Grayscale image-grid output: 8-bit PNG (zlib-deflated, with an optional
// tEXt chunk for the config fingerprint) and a PGM fallback.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

struct ImageGrid {
  int64_t width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major, one byte per pixel
};

// Tiles m images (rows of `images`, each img_h*img_w in [0,1]) into a
// near-square grid with a `pad`-pixel black border between cells.
inline ImageGrid make_grid(const Tensor& images, int64_t img_h = 28, int64_t img_w = 28,
                           int64_t pad = 2) {
  const int64_t m = images.rows();
  if (images.cols() != img_h * img_w)
    throw ValueError(detail::str("make_grid: row length ", images.cols(), " != ", img_h, "x",
                                 img_w));
  if (pad < 0) throw ValueError("make_grid: negative padding");
  const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(m))));
  const int64_t rows = (m + cols - 1) / cols;
  ImageGrid grid;
  grid.width = cols * (img_w + pad) + pad;
  grid.height = rows * (img_h + pad) + pad;
  grid.pixels.assign(static_cast<size_t>(grid.width * grid.height), 0);
  for (int64_t i = 0; i < m; ++i) {
    const int64_t gy = (i / cols) * (img_h + pad) + pad;
    const int64_t gx = (i % cols) * (img_w + pad) + pad;
    for (int64_t y = 0; y < img_h; ++y)
      for (int64_t x = 0; x < img_w; ++x) {
        const double v = std::clamp(images.at(i, y * img_w + x), 0.0, 1.0);
        grid.pixels[static_cast<size_t>((gy + y) * grid.width + gx + x)] =
            static_cast<uint8_t>(std::lround(v * 255.0));
      }
  }
  return grid;
}

namespace detail {

inline void png_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& payload) {
  auto be32 = [&](uint32_t v) {
    const uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                          static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  be32(static_cast<uint32_t>(payload.size()));
  f.write(type, 4);
  if (!payload.empty())
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  be32(static_cast<uint32_t>(crc));
}

}  // namespace detail

// Grayscale 8-bit PNG; `note` lands in a tEXt chunk under the keyword
// "config" when non-empty. Output bytes are a pure function of the inputs.
inline void write_png(const ImageGrid& grid, const std::string& path,
                      const std::string& note = {}) {
  if (grid.width < 1 || grid.height < 1 ||
      grid.pixels.size() != static_cast<size_t>(grid.width * grid.height))
    throw ValueError("write_png: inconsistent grid extents");
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(detail::str("write_png: cannot open ", path));
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr(13, 0);
  const auto w = static_cast<uint32_t>(grid.width), h = static_cast<uint32_t>(grid.height);
  ihdr[0] = static_cast<uint8_t>(w >> 24);
  ihdr[1] = static_cast<uint8_t>(w >> 16);
  ihdr[2] = static_cast<uint8_t>(w >> 8);
  ihdr[3] = static_cast<uint8_t>(w);
  ihdr[4] = static_cast<uint8_t>(h >> 24);
  ihdr[5] = static_cast<uint8_t>(h >> 16);
  ihdr[6] = static_cast<uint8_t>(h >> 8);
  ihdr[7] = static_cast<uint8_t>(h);
  ihdr[8] = 8;  // bit depth; the rest (color 0, compression 0, filter 0,
  detail::png_chunk(f, "IHDR", ihdr);  // interlace 0) stays zero

  if (!note.empty()) {
    std::vector<uint8_t> text;
    for (char c : std::string("config")) text.push_back(static_cast<uint8_t>(c));
    text.push_back(0);
    for (char c : note) text.push_back(static_cast<uint8_t>(c));
    detail::png_chunk(f, "tEXt", text);
  }

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>((grid.width + 1) * grid.height));
  for (int64_t y = 0; y < grid.height; ++y) {
    raw.push_back(0);  // filter: none
    const uint8_t* row = grid.pixels.data() + y * grid.width;
    raw.insert(raw.end(), row, row + grid.width);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> deflated(bound);
  if (compress2(deflated.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw NumericError("write_png: zlib compression failed");
  deflated.resize(bound);
  detail::png_chunk(f, "IDAT", deflated);
  detail::png_chunk(f, "IEND", {});
  if (!f) throw DataError(detail::str("write_png: short write to ", path));
}

// Binary PGM (P5) with the note as a comment line.
inline void write_pgm(const ImageGrid& grid, const std::string& path,
                      const std::string& note = {}) {
  if (grid.width < 1 || grid.height < 1 ||
      grid.pixels.size() != static_cast<size_t>(grid.width * grid.height))
    throw ValueError("write_pgm: inconsistent grid extents");
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(detail::str("write_pgm: cannot open ", path));
  f << "P5\n";
  if (!note.empty()) f << "# " << note << "\n";
  f << grid.width << " " << grid.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(grid.pixels.data()),
          static_cast<std::streamsize>(grid.pixels.size()));
  if (!f) throw DataError(detail::str("write_pgm: short write to ", path));
}

}  // namespace hsvae
