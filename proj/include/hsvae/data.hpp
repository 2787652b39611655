#pragma once

// MNIST plumbing: IDX parsing, download-with-pinned-hash acquisition, and
// deterministic epoch batching. All data failures surface as DataError.

#include <curl/curl.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/rng.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

struct Dataset {
  Tensor images;            // m x (rows*cols), scaled to [0,1]
  std::vector<int> labels;  // length m, each in [0,9]
};

namespace detail {

inline uint32_t read_be32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

}  // namespace detail

// IDX container: big-endian header (magic, one 32-bit extent per dimension),
// then payload bytes. Supported: 0x00000801 label vectors (raw values) and
// 0x00000803 image stacks (scaled by /255 into rows of length rows*cols).
inline Tensor parse_idx(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4)
    throw DataError(detail::str("parse_idx: truncated header, need 4 bytes, have ", bytes.size(),
                                " (at byte offset 0)"));
  const uint32_t magic = detail::read_be32(bytes.data());
  if (magic == 0x00000801u) {
    if (bytes.size() < 8)
      throw DataError(detail::str("parse_idx: truncated label header, need 8 bytes, have ",
                                  bytes.size(), " (at byte offset 4)"));
    const uint64_t m = detail::read_be32(bytes.data() + 4);
    if (m == 0 || m > 100000000u)
      throw DataError(detail::str("parse_idx: label count ", m, " out of range (at byte offset 4)"));
    if (bytes.size() != 8 + m)
      throw DataError(detail::str("parse_idx: expected ", 8 + m, " bytes for ", m,
                                  " labels, have ", bytes.size(), " (payload ends at byte offset ",
                                  bytes.size(), ")"));
    Tensor out = Tensor::zeros(static_cast<int64_t>(m), 1);
    auto od = out.mutable_data();
    for (uint64_t i = 0; i < m; ++i) od[i] = static_cast<double>(bytes[8 + i]);
    return out;
  }
  if (magic == 0x00000803u) {
    if (bytes.size() < 16)
      throw DataError(detail::str("parse_idx: truncated image header, need 16 bytes, have ",
                                  bytes.size(), " (at byte offset 4)"));
    const uint64_t m = detail::read_be32(bytes.data() + 4);
    const uint64_t r = detail::read_be32(bytes.data() + 8);
    const uint64_t c = detail::read_be32(bytes.data() + 12);
    if (m == 0 || r == 0 || c == 0 || m > 100000000u || r > 4096 || c > 4096)
      throw DataError(detail::str("parse_idx: image dimensions ", m, "x", r, "x", c,
                                  " out of range (at byte offset 4)"));
    const uint64_t payload = m * r * c;
    if (bytes.size() != 16 + payload)
      throw DataError(detail::str("parse_idx: expected ", 16 + payload, " bytes for ", m, "x", r,
                                  "x", c, " images, have ", bytes.size(),
                                  " (payload ends at byte offset ", bytes.size(), ")"));
    Tensor out = Tensor::zeros(static_cast<int64_t>(m), static_cast<int64_t>(r * c));
    auto od = out.mutable_data();
    for (uint64_t i = 0; i < payload; ++i) od[i] = static_cast<double>(bytes[16 + i]) / 255.0;
    return out;
  }
  throw DataError(detail::str("parse_idx: unsupported magic 0x", std::hex, magic, std::dec,
                              " (at byte offset 0); expected 0x801 labels or 0x803 images"));
}

inline std::string sha256_hex(const unsigned char* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int dlen = 0;
  if (EVP_Digest(data, len, digest, &dlen, EVP_sha256(), nullptr) != 1)
    throw DataError("sha256: digest computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(dlen * 2);
  for (unsigned int i = 0; i < dlen; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string sha256_hex(const std::vector<unsigned char>& bytes) {
  return sha256_hex(bytes.data(), bytes.size());
}

inline std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in) {
  z_stream strm{};
  if (inflateInit2(&strm, 16 + MAX_WBITS) != Z_OK) throw DataError("gunzip: inflateInit2 failed");
  std::vector<unsigned char> out;
  std::vector<unsigned char> buf(1 << 16);
  strm.next_in = const_cast<unsigned char*>(in.data());
  strm.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    strm.next_out = buf.data();
    strm.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&strm, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&strm);
      throw DataError(detail::str("gunzip: inflate failed with code ", rc));
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - strm.avail_out));
  }
  inflateEnd(&strm);
  return out;
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(detail::str("read_file: cannot open ", path.string()));
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(detail::str("write_file: cannot open ", path.string()));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError(detail::str("write_file: short write to ", path.string()));
}

inline std::vector<unsigned char> http_get(const std::string& url, long timeout_s = 120) {
  static std::once_flag curl_once;
  std::call_once(curl_once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
  CURL* h = curl_easy_init();
  if (!h) throw DataError("http_get: curl_easy_init failed");
  std::vector<unsigned char> body;
  auto sink = +[](char* ptr, size_t size, size_t nmemb, void* ud) -> size_t {
    auto* v = static_cast<std::vector<unsigned char>*>(ud);
    v->insert(v->end(), reinterpret_cast<unsigned char*>(ptr),
              reinterpret_cast<unsigned char*>(ptr) + size * nmemb);
    return size * nmemb;
  };
  curl_easy_setopt(h, CURLOPT_URL, url.c_str());
  curl_easy_setopt(h, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(h, CURLOPT_TIMEOUT, timeout_s);
  curl_easy_setopt(h, CURLOPT_WRITEFUNCTION, sink);
  curl_easy_setopt(h, CURLOPT_WRITEDATA, &body);
  curl_easy_setopt(h, CURLOPT_FAILONERROR, 1L);
  const CURLcode rc = curl_easy_perform(h);
  long status = 0;
  curl_easy_getinfo(h, CURLINFO_RESPONSE_CODE, &status);
  curl_easy_cleanup(h);
  if (rc != CURLE_OK)
    throw DataError(detail::str("http_get: ", url, " failed: ", curl_easy_strerror(rc),
                                " (http status ", status, ")"));
  return body;
}

// One remote file with the pinned digest of its *decompressed* payload (the
// bytes we actually parse); gzip-compressed sources are inflated before the
// hash check.
struct SourceFile {
  std::string url;
  std::string filename;  // cache name, decompressed
  std::string sha256;
};

struct MnistSource {
  SourceFile images, labels;
};

inline MnistSource mnist_train_source() {
  return {{"https://storage.googleapis.com/cvdf-datasets/mnist/train-images-idx3-ubyte.gz",
           "train-images-idx3-ubyte",
           "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
          {"https://storage.googleapis.com/cvdf-datasets/mnist/train-labels-idx1-ubyte.gz",
           "train-labels-idx1-ubyte",
           "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"}};
}

inline MnistSource mnist_test_source() {
  return {{"https://storage.googleapis.com/cvdf-datasets/mnist/t10k-images-idx3-ubyte.gz",
           "t10k-images-idx3-ubyte",
           "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
          {"https://storage.googleapis.com/cvdf-datasets/mnist/t10k-labels-idx1-ubyte.gz",
           "t10k-labels-idx1-ubyte",
           "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"}};
}

// Cache-then-verify acquisition. A corrupted cache file is re-downloaded once
// when online; a hash mismatch after download is a hard error, never a silent
// acceptance.
inline std::vector<unsigned char> fetch_file(const std::string& cache_dir, const SourceFile& src,
                                             bool offline) {
  const std::filesystem::path path = std::filesystem::path(cache_dir) / src.filename;
  if (std::filesystem::exists(path)) {
    std::vector<unsigned char> bytes = read_file(path);
    if (sha256_hex(bytes) == src.sha256) return bytes;
    if (offline)
      throw DataError(detail::str("fetch_file: cached ", path.string(),
                                  " fails its pinned sha256 and offline mode forbids re-download"));
  } else if (offline) {
    throw DataError(detail::str("fetch_file: ", path.string(),
                                " missing from cache and offline mode forbids download"));
  }
  std::vector<unsigned char> bytes = http_get(src.url);
  if (src.url.size() >= 3 && src.url.substr(src.url.size() - 3) == ".gz") bytes = gunzip(bytes);
  const std::string got = sha256_hex(bytes);
  if (got != src.sha256)
    throw DataError(detail::str("fetch_file: ", src.url, " digest ", got,
                                " does not match pinned ", src.sha256));
  write_file(path, bytes);
  return bytes;
}

inline Dataset fetch_dataset(const std::string& cache_dir, const MnistSource& src,
                             bool offline = false) {
  Dataset out;
  out.images = parse_idx(fetch_file(cache_dir, src.images, offline));
  Tensor labels = parse_idx(fetch_file(cache_dir, src.labels, offline));
  if (labels.rows() != out.images.rows())
    throw DataError(detail::str("fetch_dataset: ", out.images.rows(), " images but ",
                                labels.rows(), " labels"));
  out.labels.resize(static_cast<size_t>(labels.rows()));
  for (int64_t i = 0; i < labels.rows(); ++i) {
    const double v = labels.at(i, 0);
    if (v < 0 || v > 9 || v != std::floor(v))
      throw DataError(detail::str("fetch_dataset: label ", v, " at row ", i, " outside [0,9]"));
    out.labels[static_cast<size_t>(i)] = static_cast<int>(v);
  }
  return out;
}

// Epoch-seeded Fisher-Yates permutation chopped into full batches; the
// remainder is dropped (batch statistics need the full N_b).
inline std::vector<std::vector<int64_t>> batch_indices(int64_t m, int64_t batch_size, uint64_t seed,
                                                       int64_t epoch) {
  if (batch_size < 2)
    throw ValueError(detail::str("batch_indices: batch size must be >= 2, got ", batch_size));
  if (batch_size > m)
    throw ValueError(detail::str("batch_indices: batch size ", batch_size, " exceeds dataset size ", m));
  std::vector<int64_t> perm(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
  for (int64_t i = m - 1; i > 0; --i)
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);
  const int64_t nb = m / batch_size;
  std::vector<std::vector<int64_t>> out(static_cast<size_t>(nb));
  for (int64_t b = 0; b < nb; ++b)
    out[static_cast<size_t>(b)] .assign(perm.begin() + b * batch_size,
                                        perm.begin() + (b + 1) * batch_size);
  return out;
}

inline Tensor gather_rows(const Tensor& src, const std::vector<int64_t>& idx) {
  Tensor out = Tensor::zeros(static_cast<int64_t>(idx.size()), src.cols());
  auto od = out.mutable_data();
  const int64_t c = src.cols();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= src.rows())
      throw ValueError(detail::str("gather_rows: index ", idx[i], " out of range [0,", src.rows(), ")"));
    for (int64_t j = 0; j < c; ++j) od[i * static_cast<size_t>(c) + static_cast<size_t>(j)] = src.at(idx[i], j);
  }
  return out;
}

inline std::vector<Tensor> batches(const Dataset& ds, int64_t batch_size, uint64_t seed,
                                   int64_t epoch) {
  std::vector<Tensor> out;
  for (const auto& idx : batch_indices(ds.images.rows(), batch_size, seed, epoch))
    out.push_back(gather_rows(ds.images, idx));
  return out;
}

}  // namespace hsvae
