#pragma once

// Evaluation: Gaussian feature fits and the Fréchet distance between them,
// k-NN latent classification, the 3-sphere projection, the small pinned
// convolutional feature extractor, and the self-FID proxy built from all of
// the above.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/conv.hpp"
#include "hsvae/data.hpp"
#include "hsvae/distributions.hpp"
#include "hsvae/nn.hpp"
#include "hsvae/optim.hpp"
#include "hsvae/tensor.hpp"
#include "hsvae/vae.hpp"

namespace hsvae {

// ---------------------------------------------------------------------------
// Gaussian fits and the Fréchet distance
// ---------------------------------------------------------------------------

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // symmetric; sample (m-1) normalization
};

// Row-by-row accumulation in index order keeps the fit deterministic.
inline GaussianFit fit_gaussian(const Tensor& features) {
  const int64_t m = features.rows(), d = features.cols();
  if (m < 2) throw ValueError(detail::str("fit_gaussian: need >= 2 rows, got ", m));
  GaussianFit fit;
  fit.mean = Eigen::VectorXd::Zero(d);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) fit.mean[j] += features.at(i, j);
  fit.mean /= static_cast<double>(m);
  fit.cov = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd dev(d);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < d; ++j) dev[j] = features.at(i, j) - fit.mean[j];
    fit.cov.noalias() += dev * dev.transpose();
  }
  fit.cov /= static_cast<double>(m - 1);
  return fit;
}

namespace detail {

// Symmetric PSD square root; eigenvalues below zero (numerical dust) clamp to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = std::sqrt(std::max(0.0, ev[i]));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the cross term is
// evaluated as sqrt(sqrt(S_a) S_b sqrt(S_a)), which shares its eigenvalues
// with (S_a S_b)^{1/2} but stays in symmetric territory.
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw ValueError(detail::str("frechet_distance: dimension mismatch, ", a.mean.size(), " vs ",
                                 b.mean.size()));
  const Eigen::MatrixXd root_a = detail::psd_sqrt(a.cov);
  const Eigen::MatrixXd cross = detail::psd_sqrt(root_a * b.cov * root_a);
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() -
                       2.0 * cross.trace();
  return std::max(0.0, value);
}

// ---------------------------------------------------------------------------
// k-NN over cosine distance
// ---------------------------------------------------------------------------

inline double knn_accuracy(const Tensor& latents_train, const std::vector<int>& labels_train,
                           const Tensor& latents_test, const std::vector<int>& labels_test,
                           int64_t k = 5) {
  const int64_t mt = latents_train.rows(), me = latents_test.rows(), n = latents_train.cols();
  if (mt < 1 || me < 1) throw ValueError("knn_accuracy: empty latent set");
  if (latents_test.cols() != n)
    throw ValueError(detail::str("knn_accuracy: dimension mismatch ", n, " vs ",
                                 latents_test.cols()));
  if (static_cast<int64_t>(labels_train.size()) != mt ||
      static_cast<int64_t>(labels_test.size()) != me)
    throw ValueError("knn_accuracy: label counts do not match latent rows");
  if (k < 1 || k % 2 == 0) throw ValueError(detail::str("knn_accuracy: k must be odd >= 1, got ", k));
  if (k > mt)
    throw ValueError(detail::str("knn_accuracy: k = ", k, " exceeds training size ", mt));

  auto unit_rows = [n](const Tensor& t) {
    std::vector<double> out(t.data().begin(), t.data().end());
    for (int64_t i = 0; i < t.rows(); ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += t.at(i, j) * t.at(i, j);
      const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
      for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i * n + j)] *= inv;
    }
    return out;
  };
  const std::vector<double> tr = unit_rows(latents_train);
  const std::vector<double> te = unit_rows(latents_test);

  int64_t correct = 0;
  std::vector<std::pair<double, int64_t>> dist(static_cast<size_t>(mt));
  for (int64_t i = 0; i < me; ++i) {
    const double* q = te.data() + i * n;
    for (int64_t j = 0; j < mt; ++j) {
      const double* p = tr.data() + j * n;
      double dot = 0.0;
      for (int64_t c = 0; c < n; ++c) dot = std::fma(q[c], p[c], dot);
      dist[static_cast<size_t>(j)] = {1.0 - dot, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

    int votes[10] = {0};
    int max_label = 0;
    for (int64_t j = 0; j < k; ++j) {
      const int lab = labels_train[static_cast<size_t>(dist[static_cast<size_t>(j)].second)];
      if (lab < 0 || lab > 9)
        throw ValueError(detail::str("knn_accuracy: label ", lab, " outside [0,9]"));
      max_label = std::max(max_label, lab);
      ++votes[lab];
    }
    int best_votes = 0;
    for (int lab = 0; lab <= max_label; ++lab) best_votes = std::max(best_votes, votes[lab]);
    // tie-break: the first neighbor in distance order whose class is tied wins
    int chosen = -1;
    for (int64_t j = 0; j < k && chosen < 0; ++j) {
      const int lab = labels_train[static_cast<size_t>(dist[static_cast<size_t>(j)].second)];
      if (votes[lab] == best_votes) chosen = lab;
    }
    if (chosen == labels_test[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(me);
}

// ---------------------------------------------------------------------------
// 3-sphere projection (group-mean then normalize)
// ---------------------------------------------------------------------------

struct Projection3D {
  Tensor points;               // kept_rows x 3, unit rows
  std::vector<int64_t> kept;   // original row indices of the output rows
  int64_t dropped = 0;         // rows whose group means formed a zero vector
};

inline std::array<int64_t, 3> default_groups(int64_t n) {
  if (n == 128) return {42, 42, 44};
  const int64_t a = n / 3, b = n / 3;
  return {a, b, n - a - b};
}

inline Projection3D project_3sphere(const Tensor& latents, std::array<int64_t, 3> groups) {
  const int64_t n = latents.cols(), m = latents.rows();
  if (groups[0] < 1 || groups[1] < 1 || groups[2] < 1 || groups[0] + groups[1] + groups[2] != n)
    throw ValueError(detail::str("project_3sphere: groups (", groups[0], ",", groups[1], ",",
                                 groups[2], ") do not partition ", n, " coordinates"));
  std::vector<double> rows;
  rows.reserve(static_cast<size_t>(m * 3));
  Projection3D out;
  for (int64_t i = 0; i < m; ++i) {
    double v[3];
    int64_t c0 = 0;
    for (int g = 0; g < 3; ++g) {
      double s = 0.0;
      for (int64_t j = 0; j < groups[static_cast<size_t>(g)]; ++j) s += latents.at(i, c0 + j);
      v[g] = s / static_cast<double>(groups[static_cast<size_t>(g)]);
      c0 += groups[static_cast<size_t>(g)];
    }
    const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (norm == 0.0) {
      ++out.dropped;
      continue;
    }
    rows.push_back(v[0] / norm);
    rows.push_back(v[1] / norm);
    rows.push_back(v[2] / norm);
    out.kept.push_back(i);
  }
  if (out.kept.empty())
    throw ValueError("project_3sphere: every row projected to the zero vector");
  out.points = Tensor::from_data(static_cast<int64_t>(out.kept.size()), 3, std::move(rows));
  return out;
}

inline Projection3D project_3sphere(const Tensor& latents) {
  return project_3sphere(latents, default_groups(latents.cols()));
}

// Largest pairwise angle (radians) between rows treated as directions; the
// angular-spread statistic of the compression checks.
inline double max_pairwise_angle(const Tensor& dirs) {
  const int64_t m = dirs.rows(), n = dirs.cols();
  if (m < 2) throw ValueError("max_pairwise_angle: need >= 2 rows");
  std::vector<double> unit(dirs.data().begin(), dirs.data().end());
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += dirs.at(i, j) * dirs.at(i, j);
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (int64_t j = 0; j < n; ++j) unit[static_cast<size_t>(i * n + j)] *= inv;
  }
  double worst = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = i + 1; j < m; ++j) {
      double dot = 0.0;
      for (int64_t c = 0; c < n; ++c)
        dot = std::fma(unit[static_cast<size_t>(i * n + c)], unit[static_cast<size_t>(j * n + c)], dot);
      worst = std::max(worst, std::acos(std::clamp(dot, -1.0, 1.0)));
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Proxy feature extractor: conv 1->8 5x5/2, conv 8->16 5x5/2, fc 256->64
// (the 64-d feature layer), fc 64->10. Pinned weights stand in for Inception.
// ---------------------------------------------------------------------------

class ProxyClassifier {
 public:
  static constexpr int64_t kFeatureDim = 64;

  explicit ProxyClassifier(uint64_t seed = 0)
      : g1_(1, 28, 28, 5, 2), g2_(8, g1_out_hw(), g1_out_hw(), 5, 2) {
    Rng rng(mix_seed(seed, 0x70726f7879ULL));
    w1_ = he_weights(g1_.patch_len(), 8, rng, "proxy.conv1.W");
    b1_ = Tensor::zeros(1, 8, true);
    b1_.set_name("proxy.conv1.b");
    w2_ = he_weights(g2_.patch_len(), 16, rng, "proxy.conv2.W");
    b2_ = Tensor::zeros(1, 16, true);
    b2_.set_name("proxy.conv2.b");
    f1_ = Linear(flat_len(), kFeatureDim, rng, "proxy.fc1");
    f2_ = Linear(kFeatureDim, 10, rng, "proxy.fc2");
  }

  // m x 64 post-ReLU penultimate activations: the FID feature space.
  Tensor features(const Tensor& images) const {
    if (images.cols() != 784)
      throw ValueError(detail::str("ProxyClassifier: expected 784 columns, got ", images.cols()));
    Tensor h = relu(conv2d(images, w1_, b1_, g1_));
    h = relu(conv2d(h, w2_, b2_, g2_));
    return relu(f1_(h));
  }

  Tensor logits(const Tensor& images) const { return f2_(features(images)); }

  std::vector<int> predict(const Tensor& images) const {
    NoGradGuard ng;
    Tensor lg = logits(images);
    std::vector<int> out(static_cast<size_t>(lg.rows()));
    for (int64_t i = 0; i < lg.rows(); ++i) {
      int best = 0;
      for (int64_t j = 1; j < lg.cols(); ++j)
        if (lg.at(i, j) > lg.at(i, best)) best = static_cast<int>(j);
      out[static_cast<size_t>(i)] = best;
    }
    return out;
  }

  double accuracy(const Dataset& ds, int64_t eval_batch = 500) const {
    int64_t correct = 0;
    const int64_t m = ds.images.rows();
    for (int64_t i0 = 0; i0 < m; i0 += eval_batch) {
      std::vector<int64_t> idx;
      for (int64_t i = i0; i < std::min(m, i0 + eval_batch); ++i) idx.push_back(i);
      const std::vector<int> pred = predict(gather_rows(ds.images, idx));
      for (size_t j = 0; j < idx.size(); ++j)
        if (pred[j] == ds.labels[static_cast<size_t>(idx[j])]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(m);
  }

  std::vector<Tensor> parameters() const {
    return {w1_, b1_, w2_, b2_, f1_.W, f1_.b, f2_.W, f2_.b};
  }

 private:
  static int64_t g1_out_hw() { return (28 - 5) / 2 + 1; }
  int64_t flat_len() const { return 16 * g2_.positions(); }

  static Tensor he_weights(int64_t rows, int64_t cols, Rng& rng, const char* name) {
    Tensor w = Tensor::randn(rows, cols, rng, true);
    const double scale = std::sqrt(2.0 / static_cast<double>(rows));
    for (auto& v : w.mutable_data()) v *= scale;
    w.set_name(name);
    return w;
  }

  Conv2dGeom g1_, g2_;
  Tensor w1_, b1_, w2_, b2_;
  Linear f1_, f2_;
};

inline void save_proxy(const ProxyClassifier& proxy, const std::string& path,
                       const std::string& note = {}) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(detail::str("save_proxy: cannot open ", path));
  f.write("HSPROXY1", 8);
  detail::put_u32(f, static_cast<uint32_t>(note.size()));
  f.write(note.data(), static_cast<std::streamsize>(note.size()));
  for (const Tensor& t : proxy.parameters()) {
    detail::put_u32(f, static_cast<uint32_t>(t.rows()));
    detail::put_u32(f, static_cast<uint32_t>(t.cols()));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  if (!f) throw DataError(detail::str("save_proxy: short write to ", path));
}

inline ProxyClassifier load_proxy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw DataError(detail::str("load_proxy: cannot open ", path,
                                "; train the extractor first (train-proxy command)"));
  char magic[8];
  if (!f.read(magic, 8) || std::string(magic, 8) != "HSPROXY1")
    throw DataError(detail::str("load_proxy: ", path, " has wrong magic (want HSPROXY1)"));
  const uint32_t note_len = detail::get_u32(f, path);
  if (note_len > (1u << 20))
    throw DataError(detail::str("load_proxy: ", path, " note length ", note_len, " not plausible"));
  std::string note(note_len, '\0');
  if (note_len > 0 && !f.read(note.data(), note_len))
    throw DataError(detail::str("load_proxy: ", path, " truncated in note"));
  ProxyClassifier proxy(0);
  for (Tensor& t : proxy.parameters()) {
    const uint32_t rows = detail::get_u32(f, path);
    const uint32_t cols = detail::get_u32(f, path);
    if (rows != static_cast<uint32_t>(t.rows()) || cols != static_cast<uint32_t>(t.cols()))
      throw DataError(detail::str("load_proxy: ", path, " parameter shape ", rows, "x", cols,
                                  " does not match ", t.rows(), "x", t.cols()));
    auto dst = t.mutable_data();
    if (!f.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.size() * sizeof(double))))
      throw DataError(detail::str("load_proxy: ", path, " truncated in parameter payload"));
  }
  f.peek();
  if (!f.eof()) throw DataError(detail::str("load_proxy: ", path, " has trailing bytes"));
  return proxy;
}

struct ProxyTrainResult {
  ProxyClassifier proxy;
  std::vector<double> test_accuracy;  // one entry per epoch
};

inline ProxyTrainResult train_proxy(const Dataset& train, const Dataset& test, int64_t epochs,
                                    uint64_t seed, double lr = 1e-3, int64_t batch_size = 128) {
  if (epochs < 1) throw ConfigError(detail::str("train_proxy: epochs must be >= 1, got ", epochs));
  ProxyTrainResult result{ProxyClassifier(seed), {}};
  AdamOptimizer opt(result.proxy.parameters(), {.lr = lr});
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    int64_t batch_no = 0;
    for (const auto& idx : batch_indices(train.images.rows(), batch_size, seed, epoch)) {
      Tensor x = gather_rows(train.images, idx);
      std::vector<int> labels(idx.size());
      for (size_t j = 0; j < idx.size(); ++j)
        labels[j] = train.labels[static_cast<size_t>(idx[j])];
      try {
        Tensor loss = softmax_xent(result.proxy.logits(x), labels);
        if (!std::isfinite(loss.value())) throw NumericError("non-finite loss");
        backward(loss);
        opt.step();
      } catch (const NumericError& e) {
        throw NumericError(detail::str("train_proxy: epoch ", epoch, ", batch ", batch_no, ": ",
                                       e.what()));
      }
      ++batch_no;
    }
    result.test_accuracy.push_back(result.proxy.accuracy(test));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Self-FID proxy
// ---------------------------------------------------------------------------

struct SelfFidResult {
  double value = 0.0;
  bool regularized = false;  // a degenerate covariance needed the +1e-6 I ridge
};

// Latent samplers for the two generation paths (prior vs fitted vMF whose
// radius matches the reference latents' mean norm).
inline Tensor sample_prior_latents(int64_t count, int64_t n, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7072696f72ULL));
  return Tensor::randn(count, n, rng);
}

inline Tensor sample_vmf_latents(const Tensor& reference_latents, int64_t count, uint64_t seed) {
  const VmfParams fit = fit_vmf(reference_latents);
  Tensor dirs = sample_vmf(fit, count, seed);
  double mean_norm = 0.0;
  for (int64_t i = 0; i < reference_latents.rows(); ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < reference_latents.cols(); ++j)
      s += reference_latents.at(i, j) * reference_latents.at(i, j);
    mean_norm += std::sqrt(s);
  }
  mean_norm /= static_cast<double>(reference_latents.rows());
  return mul(dirs, mean_norm);
}

// Fréchet distance between proxy-feature Gaussians of (i) decodings of the
// sampled latents and (ii) deterministic reconstructions of the test set.
// Both covariances get a +1e-6 I ridge; `regularized` reports whether either
// was genuinely degenerate before it.
inline SelfFidResult self_fid_proxy(const VaeModel& model, const Tensor& test_images,
                                    const Tensor& sampled_latents,
                                    const ProxyClassifier& extractor, int64_t count = 10000) {
  if (count < 2) throw ValueError(detail::str("self_fid_proxy: count must be >= 2, got ", count));
  if (count > test_images.rows() || count > sampled_latents.rows())
    throw ValueError(detail::str("self_fid_proxy: count ", count, " exceeds available rows (",
                                 test_images.rows(), " test, ", sampled_latents.rows(),
                                 " sampled)"));
  if (sampled_latents.cols() != model.latent_dim())
    throw ValueError(detail::str("self_fid_proxy: latent dimension ", sampled_latents.cols(),
                                 " does not match model ", model.latent_dim()));
  std::vector<int64_t> head(static_cast<size_t>(count));
  std::iota(head.begin(), head.end(), 0);

  NoGradGuard ng;
  Tensor generated = detail::batched_map(gather_rows(sampled_latents, head), 500,
                                         [&](const Tensor& z) { return model.decode(z); });
  Tensor reconstructed = reconstruct(model, gather_rows(test_images, head));
  Tensor feat_gen = detail::batched_map(generated, 500,
                                        [&](const Tensor& x) { return extractor.features(x); });
  Tensor feat_rec = detail::batched_map(reconstructed, 500,
                                        [&](const Tensor& x) { return extractor.features(x); });

  GaussianFit a = fit_gaussian(feat_gen);
  GaussianFit b = fit_gaussian(feat_rec);
  SelfFidResult out;
  const double min_eig =
      std::min(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a.cov).eigenvalues().minCoeff(),
               Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(b.cov).eigenvalues().minCoeff());
  out.regularized = min_eig < 1e-10;
  const Eigen::MatrixXd ridge =
      1e-6 * Eigen::MatrixXd::Identity(a.cov.rows(), a.cov.cols());
  a.cov += ridge;
  b.cov += ridge;
  out.value = frechet_distance(a, b);
  return out;
}

// ---------------------------------------------------------------------------
// Report formats
// ---------------------------------------------------------------------------

inline std::string metrics_csv_header() { return "metric,mode,n,beta,value,count,seed\n"; }

inline std::string metrics_csv_row(const std::string& metric, Mode mode, int64_t n, double beta,
                                   double value, int64_t count, uint64_t seed) {
  std::ostringstream os;
  os.precision(17);
  os << metric << "," << mode_name(mode) << "," << n << "," << beta << "," << value << ","
     << count << "," << seed << "\n";
  return os.str();
}

inline std::string projection_csv(const Projection3D& proj, const std::vector<int>& labels) {
  std::ostringstream os;
  os.precision(17);
  os << "x,y,z,label\n";
  for (int64_t i = 0; i < proj.points.rows(); ++i) {
    const int64_t src = proj.kept[static_cast<size_t>(i)];
    os << proj.points.at(i, 0) << "," << proj.points.at(i, 1) << "," << proj.points.at(i, 2)
       << "," << labels[static_cast<size_t>(src)] << "\n";
  }
  return os.str();
}

}  // namespace hsvae
