#include "hsvae/image.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/tensor.hpp"

namespace fs = std::filesystem;
using namespace hsvae;

namespace {

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "hsvae-image-test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  EXPECT_TRUE(f.good()) << p;
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

uint32_t be32(const std::vector<uint8_t>& b, size_t at) {
  return (uint32_t(b[at]) << 24) | (uint32_t(b[at + 1]) << 16) | (uint32_t(b[at + 2]) << 8) |
         uint32_t(b[at + 3]);
}

struct Chunk {
  std::string type;
  std::vector<uint8_t> payload;
};

// Walks the container after the 8-byte signature, verifying each CRC.
std::vector<Chunk> parse_chunks(const std::vector<uint8_t>& bytes) {
  std::vector<Chunk> out;
  size_t at = 8;
  while (at + 12 <= bytes.size()) {
    const uint32_t len = be32(bytes, at);
    Chunk c;
    c.type.assign(bytes.begin() + at + 4, bytes.begin() + at + 8);
    c.payload.assign(bytes.begin() + at + 8, bytes.begin() + at + 8 + len);
    uLong crc = crc32(0L, bytes.data() + at + 4, 4 + len);
    EXPECT_EQ(be32(bytes, at + 8 + len), static_cast<uint32_t>(crc)) << c.type;
    out.push_back(std::move(c));
    at += 12 + len;
  }
  EXPECT_EQ(at, bytes.size());
  return out;
}

}  // namespace

TEST(MakeGrid, PlacesCellsWithPadding) {
  // Three 2x2 images, pad 1: 2x2 cell layout, 7x7 canvas.
  Tensor imgs = Tensor::from_data(3, 4,
                                  {0.0, 1.0, 0.5, 0.25,    //
                                   1.0, 1.0, 1.0, 1.0,     //
                                   0.25, 0.25, 0.25, 0.25});
  ImageGrid g = make_grid(imgs, 2, 2, 1);
  EXPECT_EQ(g.width, 7);
  EXPECT_EQ(g.height, 7);
  ASSERT_EQ(g.pixels.size(), 49u);
  // Image 0 lands at (1,1): 0, 255, 128, 64 (lround of v*255).
  EXPECT_EQ(g.pixels[1 * 7 + 1], 0);
  EXPECT_EQ(g.pixels[1 * 7 + 2], 255);
  EXPECT_EQ(g.pixels[2 * 7 + 1], 128);
  EXPECT_EQ(g.pixels[2 * 7 + 2], 64);
  // Image 1 at (1,4), image 2 at (4,1).
  EXPECT_EQ(g.pixels[1 * 7 + 4], 255);
  EXPECT_EQ(g.pixels[4 * 7 + 1], 64);
  // Padding stays black, including the empty fourth cell.
  EXPECT_EQ(g.pixels[0], 0);
  EXPECT_EQ(g.pixels[3 * 7 + 3], 0);
  EXPECT_EQ(g.pixels[4 * 7 + 4], 0);
}

TEST(MakeGrid, ClampsAndHandlesNoPad) {
  Tensor imgs = Tensor::from_data(1, 4, {-0.5, 1.5, 0.0, 1.0});
  ImageGrid g = make_grid(imgs, 2, 2, 0);
  EXPECT_EQ(g.width, 2);
  EXPECT_EQ(g.height, 2);
  EXPECT_EQ(g.pixels[0], 0);
  EXPECT_EQ(g.pixels[1], 255);
}

TEST(MakeGrid, RejectsBadShapes) {
  Tensor imgs = Tensor::from_data(1, 3, {0.0, 0.0, 0.0});
  EXPECT_THROW(make_grid(imgs, 2, 2, 1), ValueError);
  Tensor ok = Tensor::from_data(1, 4, {0.0, 0.0, 0.0, 0.0});
  EXPECT_THROW(make_grid(ok, 2, 2, -1), ValueError);
}

TEST(Png, SignatureChunksAndPixelRoundTrip) {
  ImageGrid g{3, 2, {10, 20, 30, 40, 50, 60}};
  const fs::path path = temp_file("grid.png");
  write_png(g, path.string(), "config_fingerprint=0123456789abcdef");
  std::vector<uint8_t> bytes = slurp(path);

  const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_TRUE(std::equal(sig, sig + 8, bytes.begin()));

  std::vector<Chunk> chunks = parse_chunks(bytes);
  ASSERT_EQ(chunks.size(), 4u);
  EXPECT_EQ(chunks[0].type, "IHDR");
  EXPECT_EQ(chunks[1].type, "tEXt");
  EXPECT_EQ(chunks[2].type, "IDAT");
  EXPECT_EQ(chunks[3].type, "IEND");

  ASSERT_EQ(chunks[0].payload.size(), 13u);
  EXPECT_EQ(be32(chunks[0].payload, 0), 3u);  // width
  EXPECT_EQ(be32(chunks[0].payload, 4), 2u);  // height
  EXPECT_EQ(chunks[0].payload[8], 8);         // bit depth
  EXPECT_EQ(chunks[0].payload[9], 0);         // grayscale
  EXPECT_EQ(chunks[0].payload[12], 0);        // no interlace

  const std::string keyword = "config";
  std::vector<uint8_t> want_text(keyword.begin(), keyword.end());
  want_text.push_back(0);
  const std::string note = "config_fingerprint=0123456789abcdef";
  want_text.insert(want_text.end(), note.begin(), note.end());
  EXPECT_EQ(chunks[1].payload, want_text);

  // Inflate the IDAT stream: per-row filter byte 0 then the raw pixels.
  std::vector<uint8_t> raw((3 + 1) * 2);
  uLongf raw_len = raw.size();
  ASSERT_EQ(uncompress(raw.data(), &raw_len, chunks[2].payload.data(),
                       static_cast<uLong>(chunks[2].payload.size())),
            Z_OK);
  ASSERT_EQ(raw_len, raw.size());
  const std::vector<uint8_t> want_raw = {0, 10, 20, 30, 0, 40, 50, 60};
  EXPECT_EQ(raw, want_raw);
  EXPECT_TRUE(chunks[3].payload.empty());
}

TEST(Png, SameInputSameBytes) {
  ImageGrid g{4, 3, std::vector<uint8_t>(12, 200)};
  g.pixels[5] = 17;
  const fs::path a = temp_file("det_a.png"), b = temp_file("det_b.png");
  write_png(g, a.string(), "note");
  write_png(g, b.string(), "note");
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(Png, OmitsTextChunkWithoutNote) {
  ImageGrid g{2, 2, {1, 2, 3, 4}};
  const fs::path path = temp_file("plain.png");
  write_png(g, path.string());
  std::vector<Chunk> chunks = parse_chunks(slurp(path));
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_EQ(chunks[1].type, "IDAT");
}

TEST(Png, RejectsInconsistentGrid) {
  ImageGrid g{3, 2, {1, 2, 3}};  // wrong pixel count
  EXPECT_THROW(write_png(g, temp_file("bad.png").string()), ValueError);
}

TEST(Pgm, HeaderCommentAndPayload) {
  ImageGrid g{3, 2, {10, 20, 30, 40, 50, 60}};
  const fs::path path = temp_file("grid.pgm");
  write_pgm(g, path.string(), "config_fingerprint=deadbeef");
  std::vector<uint8_t> bytes = slurp(path);
  const std::string header = "P5\n# config_fingerprint=deadbeef\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  EXPECT_EQ(std::vector<uint8_t>(bytes.end() - 6, bytes.end()),
            (std::vector<uint8_t>{10, 20, 30, 40, 50, 60}));
}

TEST(Pgm, NoNoteMeansNoComment) {
  ImageGrid g{1, 1, {255}};
  const fs::path path = temp_file("plain.pgm");
  write_pgm(g, path.string());
  std::vector<uint8_t> bytes = slurp(path);
  const std::string header = "P5\n1 1\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 1);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
}
