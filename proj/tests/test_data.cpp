#include <gtest/gtest.h>
#include <zlib.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <thread>

#include "httplib.h"
#include "hsvae/data.hpp"

using namespace hsvae;
namespace fs = std::filesystem;

namespace {

void push_be32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> make_label_fixture(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> v;
  push_be32(v, 0x00000801u);
  push_be32(v, static_cast<uint32_t>(labels.size()));
  v.insert(v.end(), labels.begin(), labels.end());
  return v;
}

std::vector<unsigned char> make_image_fixture(uint32_t m, uint32_t r, uint32_t c,
                                              const std::vector<unsigned char>& pixels) {
  std::vector<unsigned char> v;
  push_be32(v, 0x00000803u);
  push_be32(v, m);
  push_be32(v, r);
  push_be32(v, c);
  v.insert(v.end(), pixels.begin(), pixels.end());
  return v;
}

std::vector<unsigned char> gzip_bytes(const std::vector<unsigned char>& in) {
  z_stream strm{};
  EXPECT_EQ(deflateInit2(&strm, Z_BEST_SPEED, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY),
            Z_OK);
  std::vector<unsigned char> out(deflateBound(&strm, static_cast<uLong>(in.size())) + 32);
  strm.next_in = const_cast<unsigned char*>(in.data());
  strm.avail_in = static_cast<uInt>(in.size());
  strm.next_out = out.data();
  strm.avail_out = static_cast<uInt>(out.size());
  EXPECT_EQ(deflate(&strm, Z_FINISH), Z_STREAM_END);
  out.resize(out.size() - strm.avail_out);
  deflateEnd(&strm);
  return out;
}

std::string default_cache_dir() {
  if (const char* env = std::getenv("HSVAE_CACHE")) return env;
  const char* home = std::getenv("HOME");
  return std::string(home ? home : ".") + "/.cache/hsvae/mnist";
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("hsvae-test-" + std::to_string(::getpid()) + "-" +
                                        std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

TEST(ParseIdx, HandBuiltLabelFixture) {
  Tensor t = parse_idx(make_label_fixture({7, 3}));
  ASSERT_EQ(t.rows(), 2);
  ASSERT_EQ(t.cols(), 1);
  EXPECT_DOUBLE_EQ(t.at(0, 0), 7.0);
  EXPECT_DOUBLE_EQ(t.at(1, 0), 3.0);
}

TEST(ParseIdx, HandBuiltImageFixtureRoundTrip) {
  std::vector<unsigned char> pixels = {0, 51, 102, 153, 204, 255, 10, 20};
  Tensor t = parse_idx(make_image_fixture(2, 2, 2, pixels));
  ASSERT_EQ(t.rows(), 2);
  ASSERT_EQ(t.cols(), 4);
  for (size_t i = 0; i < pixels.size(); ++i)
    EXPECT_DOUBLE_EQ(t.data()[i], pixels[i] / 255.0);
  EXPECT_DOUBLE_EQ(t.at(1, 1), 255.0 / 255.0);
}

TEST(ParseIdx, ErrorsReportOffsets) {
  try {
    parse_idx(std::vector<unsigned char>{0, 0});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos);
  }

  std::vector<unsigned char> bad_magic = {0, 0, 8, 9, 0, 0, 0, 1, 5};
  EXPECT_THROW(parse_idx(bad_magic), DataError);

  std::vector<unsigned char> truncated = make_label_fixture({7, 3});
  truncated.pop_back();
  try {
    parse_idx(truncated);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 9"), std::string::npos);
  }

  std::vector<unsigned char> overflow;
  push_be32(overflow, 0x00000803u);
  push_be32(overflow, 0xFFFFFFFFu);
  push_be32(overflow, 28);
  push_be32(overflow, 28);
  EXPECT_THROW(parse_idx(overflow), DataError);
}

TEST(Sha256, KnownDigest) {
  // sha256("abc"), the classic test vector
  std::vector<unsigned char> abc = {'a', 'b', 'c'};
  EXPECT_EQ(sha256_hex(abc), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Gzip, RoundTrip) {
  std::vector<unsigned char> payload = make_image_fixture(1, 2, 2, {1, 2, 3, 4});
  std::vector<unsigned char> back = gunzip(gzip_bytes(payload));
  EXPECT_EQ(back, payload);
}

TEST(Fetch, CacheHitVerifiesHash) {
  TempDir tmp;
  std::vector<unsigned char> fixture = make_label_fixture({1, 2, 3});
  write_file(tmp.path / "fix.idx", fixture);
  SourceFile src{"http://unreachable.invalid/fix.idx", "fix.idx", sha256_hex(fixture)};
  // offline: cache satisfies the request, no network touched
  std::vector<unsigned char> got = fetch_file(tmp.path.string(), src, true);
  EXPECT_EQ(got, fixture);
}

TEST(Fetch, OfflineMissesAndCorruptionAreErrors) {
  TempDir tmp;
  std::vector<unsigned char> fixture = make_label_fixture({1, 2, 3});
  SourceFile src{"http://unreachable.invalid/fix.idx", "fix.idx", sha256_hex(fixture)};
  EXPECT_THROW(fetch_file(tmp.path.string(), src, true), DataError);
  write_file(tmp.path / "fix.idx", make_label_fixture({9, 9, 9}));
  EXPECT_THROW(fetch_file(tmp.path.string(), src, true), DataError);
}

TEST(Fetch, LoopbackDownloadPlainAndGzip) {
  std::vector<unsigned char> labels = make_label_fixture({4, 1, 0, 9});
  std::vector<unsigned char> images = make_image_fixture(4, 2, 2,
                                                         {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  std::vector<unsigned char> images_gz = gzip_bytes(images);

  httplib::Server svr;
  svr.Get("/labels.idx", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(std::string(labels.begin(), labels.end()), "application/octet-stream");
  });
  svr.Get("/images.idx.gz", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(std::string(images_gz.begin(), images_gz.end()), "application/octet-stream");
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread server([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  TempDir tmp;
  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  MnistSource src{{base + "/images.idx.gz", "imgs", sha256_hex(images)},
                  {base + "/labels.idx", "lbls", sha256_hex(labels)}};

  // corrupt pre-existing cache entry gets replaced by a fresh download
  write_file(tmp.path / "lbls", {1, 2, 3});
  Dataset ds = fetch_dataset(tmp.path.string(), src, false);
  EXPECT_EQ(ds.images.rows(), 4);
  EXPECT_EQ(ds.images.cols(), 4);
  ASSERT_EQ(ds.labels.size(), 4u);
  EXPECT_EQ(ds.labels[0], 4);
  EXPECT_EQ(ds.labels[3], 9);

  // second call is served from cache: shut the server down first to prove it
  svr.stop();
  server.join();
  Dataset again = fetch_dataset(tmp.path.string(), src, false);
  EXPECT_EQ(again.labels, ds.labels);

  // pinned-hash mismatch on download is a hard error
  httplib::Server bad;
  bad.Get("/labels.idx", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content("junk", "application/octet-stream");
  });
  const int bad_port = bad.bind_to_any_port("127.0.0.1");
  std::thread bad_server([&] { bad.listen_after_bind(); });
  bad.wait_until_ready();
  TempDir tmp2;
  SourceFile bad_src{"http://127.0.0.1:" + std::to_string(bad_port) + "/labels.idx", "lbls",
                     sha256_hex(labels)};
  EXPECT_THROW(fetch_file(tmp2.path.string(), bad_src, false), DataError);
  bad.stop();
  bad_server.join();
}

TEST(Fetch, OfficialMnistDimensionsWhenPresent) {
  const std::string cache = default_cache_dir();
  try {
    Dataset train = fetch_dataset(cache, mnist_train_source(), true);
    Dataset test = fetch_dataset(cache, mnist_test_source(), true);
    EXPECT_EQ(train.images.rows(), 60000);
    EXPECT_EQ(train.images.cols(), 784);
    EXPECT_EQ(train.labels.size(), 60000u);
    EXPECT_EQ(test.images.rows(), 10000);
    EXPECT_EQ(test.images.cols(), 784);
    double lo = 1e9, hi = -1e9;
    for (double v : train.images.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
  } catch (const DataError&) {
    GTEST_SKIP() << "official MNIST files not present in cache " << cache;
  }
}

TEST(Batching, CountsAndDeterminism) {
  auto b1 = batch_indices(10, 4, 7, 0);
  ASSERT_EQ(b1.size(), 2u);  // floor(10/4)
  EXPECT_EQ(b1[0].size(), 4u);
  auto b2 = batch_indices(10, 4, 7, 0);
  EXPECT_EQ(b1, b2);
  auto b3 = batch_indices(10, 4, 7, 1);
  EXPECT_NE(b1, b3);  // different epoch reshuffles
  EXPECT_THROW(batch_indices(10, 11, 7, 0), ValueError);
  EXPECT_THROW(batch_indices(10, 1, 7, 0), ValueError);
}

TEST(Batching, PermutationPrefixProperty) {
  const int64_t m = 103, nb = 10;
  auto groups = batch_indices(m, nb, 99, 3);
  ASSERT_EQ(groups.size(), 10u);
  std::set<int64_t> seen;
  for (const auto& g : groups)
    for (int64_t idx : g) {
      EXPECT_GE(idx, 0);
      EXPECT_LT(idx, m);
      EXPECT_TRUE(seen.insert(idx).second) << "duplicate index " << idx;
    }
  EXPECT_EQ(seen.size(), 100u);
}

TEST(Batching, GatherMaterializesRows) {
  Dataset ds;
  ds.images = Tensor::from_data(3, 2, {1, 2, 3, 4, 5, 6});
  ds.labels = {0, 1, 2};
  auto bs = batches(ds, 2, 5, 0);
  ASSERT_EQ(bs.size(), 1u);
  EXPECT_EQ(bs[0].rows(), 2);
  EXPECT_EQ(bs[0].cols(), 2);
  Tensor g = gather_rows(ds.images, {2, 0});
  EXPECT_DOUBLE_EQ(g.at(0, 0), 5);
  EXPECT_DOUBLE_EQ(g.at(1, 1), 2);
  EXPECT_THROW(gather_rows(ds.images, {3}), ValueError);
}

}  // namespace
