#pragma once

// The VAE itself: MLP encoder/decoder, reparameterization, the standard
// ELBO-style losses and the hyperspherical batch-statistics losses with
// their compression priors, gain/annealing schedules, the training loop,
// and versioned checkpoint IO.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/data.hpp"
#include "hsvae/hypersphere.hpp"
#include "hsvae/nn.hpp"
#include "hsvae/optim.hpp"
#include "hsvae/rng.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

enum class Mode : uint32_t { standard = 0, hyperspherical = 1 };

inline const char* mode_name(Mode m) {
  return m == Mode::standard ? "standard" : "hyperspherical";
}

inline Mode mode_from_name(const std::string& s) {
  if (s == "standard") return Mode::standard;
  if (s == "hyperspherical") return Mode::hyperspherical;
  throw ConfigError(detail::str("unknown mode '", s, "'; expected standard or hyperspherical"));
}

struct EncoderOutput {
  Tensor mu;       // batch x n
  Tensor sigma;    // batch x n, strictly positive (exp of half log-variance)
  Tensor log_var;  // batch x n, the raw head output
};

// Targets and gains for the batch-statistics losses. Angle arrays are
// indexed by k-1 for angles k = 1..n-1; alpha multiplies the squared mean
// gaps, beta the squared std gaps, shared between the mu and sigma families.
struct PriorSpec {
  std::vector<double> a_mu_angle, a_sigma_angle, b_mu_angle, b_sigma_angle;
  double a_mu_r = 0.0, a_sigma_r = 0.0, b_mu_r = 0.0, b_sigma_r = 0.0;
  std::vector<double> alpha_angle, beta_angle;
  double alpha_r = 1.0, beta_r = 1.0;

  void validate(int64_t n, Mode mode) const {
    const size_t want = static_cast<size_t>(n - 1);
    for (const auto& [arr, nm] :
         {std::pair<const std::vector<double>*, const char*>{&a_mu_angle, "a_mu_angle"},
          {&a_sigma_angle, "a_sigma_angle"},
          {&b_mu_angle, "b_mu_angle"},
          {&b_sigma_angle, "b_sigma_angle"},
          {&alpha_angle, "alpha_angle"},
          {&beta_angle, "beta_angle"}}) {
      if (arr->size() != want)
        throw ConfigError(detail::str("PriorSpec: ", nm, " needs ", want, " entries, has ",
                                      arr->size()));
    }
    for (double g : alpha_angle)
      if (g < 0) throw ConfigError("PriorSpec: negative alpha gain");
    for (double g : beta_angle)
      if (g < 0) throw ConfigError("PriorSpec: negative beta gain");
    if (alpha_r < 0 || beta_r < 0) throw ConfigError("PriorSpec: negative radius gain");
    if (mode == Mode::hyperspherical) {
      for (size_t k = 0; k < a_mu_angle.size(); ++k)
        if (a_mu_angle[k] == 0.0)
          throw ConfigError(detail::str("PriorSpec: compression needs a_mu_angle != 0, angle ",
                                        k + 1, " is 0"));
      const double root_n = std::sqrt(static_cast<double>(n));
      if (std::abs(a_mu_r - root_n) > 1e-9)
        throw ConfigError(detail::str("PriorSpec: compression needs a_mu_r = sqrt(n) = ", root_n,
                                      ", got ", a_mu_r));
    }
  }
};

// Gains fall off as 1/sqrt(k+1) over the angle index k = 1..n-1; radius
// gains stay at 1.
inline std::pair<std::vector<double>, std::vector<double>> gain_schedule(int64_t n) {
  if (n < 2) throw ValueError(detail::str("gain_schedule: need n >= 2, got ", n));
  std::vector<double> alpha(static_cast<size_t>(n - 1));
  for (int64_t k = 1; k <= n - 1; ++k)
    alpha[static_cast<size_t>(k - 1)] = 1.0 / std::sqrt(static_cast<double>(k) + 1.0);
  return {alpha, alpha};
}

// Compression defaults: pull every cosine toward 1 (angles to 0) and both
// radii to sqrt(n); sigma cosines target the all-ones direction; a small
// nonzero spread target on the mu cosines keeps the batch from collapsing
// onto a single point.
inline PriorSpec compression_prior(int64_t n) {
  if (n < 2) throw ValueError(detail::str("compression_prior: need n >= 2, got ", n));
  PriorSpec p;
  const size_t m = static_cast<size_t>(n - 1);
  p.a_mu_angle.assign(m, 1.0);
  p.a_sigma_angle.resize(m);
  for (int64_t k = 1; k <= n - 1; ++k)
    p.a_sigma_angle[static_cast<size_t>(k - 1)] =
        1.0 / std::sqrt(static_cast<double>(n - k) + 1.0);
  p.b_mu_angle.assign(m, 0.05);
  p.b_sigma_angle.assign(m, 0.0);
  p.a_mu_r = std::sqrt(static_cast<double>(n));
  p.a_sigma_r = std::sqrt(static_cast<double>(n));
  p.b_mu_r = 0.0;
  p.b_sigma_r = 0.0;
  auto [alpha, beta] = gain_schedule(n);
  p.alpha_angle = std::move(alpha);
  p.beta_angle = std::move(beta);
  p.alpha_r = 1.0;
  p.beta_r = 1.0;
  return p;
}

struct TrainConfig {
  int64_t n = 128;
  int64_t batch_size = 200;
  double beta_max = 1.0;
  int64_t epochs = 1;
  int64_t anneal_epochs = 100;
  Mode mode = Mode::standard;
  uint64_t seed = 0;
  double lr = 1e-3;
  bool kld_batch_mean = false;  // Eq. 2 as printed sums over the batch
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;           // empty: no files written
  std::string artifact_note;     // stamped into the checkpoint and log CSV

  void validate() const {
    if (n < 2) throw ConfigError(detail::str("TrainConfig: n must be >= 2, got ", n));
    if (batch_size < 2)
      throw ConfigError(detail::str("TrainConfig: batch_size must be >= 2, got ", batch_size));
    if (epochs < 1) throw ConfigError(detail::str("TrainConfig: epochs must be >= 1, got ", epochs));
    if (anneal_epochs < 1)
      throw ConfigError(detail::str("TrainConfig: anneal_epochs must be >= 1, got ", anneal_epochs));
    if (beta_max < 0) throw ConfigError(detail::str("TrainConfig: beta_max must be >= 0, got ", beta_max));
    if (!(lr > 0)) throw ConfigError(detail::str("TrainConfig: lr must be > 0, got ", lr));
  }
};

// beta(e) = beta_max * sqrt(min(e, anneal)/anneal): square-root warmup over
// the first anneal_epochs epochs, flat afterwards.
inline double beta_schedule(int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ValueError(detail::str("beta_schedule: epoch must be >= 0, got ", epoch));
  const double clamped = static_cast<double>(std::min(epoch, cfg.anneal_epochs));
  return cfg.beta_max * std::sqrt(clamped / static_cast<double>(cfg.anneal_epochs));
}

class VaeModel {
 public:
  VaeModel(int64_t d, int64_t n, Mode mode, uint64_t seed,
           std::vector<int64_t> hidden = {512, 256})
      : d_(d), n_(n), mode_(mode), hidden_(std::move(hidden)) {
    if (d < 1 || n < 2)
      throw ValueError(detail::str("VaeModel: need d >= 1 and n >= 2, got d=", d, ", n=", n));
    if (hidden_.empty()) throw ValueError("VaeModel: need at least one hidden layer");
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    int64_t prev = d_;
    for (size_t i = 0; i < hidden_.size(); ++i) {
      enc_.emplace_back(prev, hidden_[i], rng, detail::str("enc", i + 1));
      prev = hidden_[i];
    }
    enc_head_ = Linear(prev, 2 * n_, rng, "enc_head");
    prev = n_;
    for (size_t i = 0; i < hidden_.size(); ++i) {
      const int64_t width = hidden_[hidden_.size() - 1 - i];
      dec_.emplace_back(prev, width, rng, detail::str("dec", i + 1));
      prev = width;
    }
    dec_head_ = Linear(prev, d_, rng, "dec_head");
  }

  int64_t latent_dim() const { return n_; }
  int64_t data_dim() const { return d_; }
  Mode mode() const { return mode_; }
  const std::vector<int64_t>& hidden_sizes() const { return hidden_; }

  EncoderOutput encode(const Tensor& x) const {
    Tensor h = x;
    for (size_t i = 0; i < enc_.size(); ++i) {
      h = relu(enc_[i](h));
      check_finite(h, detail::str("encoder layer ", i + 1));
    }
    Tensor o = enc_head_(h);
    check_finite(o, "encoder head");
    EncoderOutput e;
    e.mu = slice_cols(o, 0, n_);
    e.log_var = slice_cols(o, n_, 2 * n_);
    e.sigma = exp_(mul(e.log_var, 0.5));
    check_finite(e.sigma, "encoder sigma head");
    return e;
  }

  Tensor decode(const Tensor& z) const {
    Tensor h = z;
    for (size_t i = 0; i < dec_.size(); ++i) {
      h = relu(dec_[i](h));
      check_finite(h, detail::str("decoder layer ", i + 1));
    }
    Tensor out = sigmoid(dec_head_(h));
    check_finite(out, "decoder head");
    return out;
  }

  // z = mu + eps (.) sigma, then projected onto the sqrt(n) sphere in
  // hyperspherical mode.
  Tensor reparameterize(const EncoderOutput& e, const Tensor& eps) const {
    Tensor z = add(e.mu, mul(eps, e.sigma));
    if (mode_ == Mode::hyperspherical)
      z = normalize_to_radius(z, std::sqrt(static_cast<double>(n_)));
    return z;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : enc_) {
      out.push_back(l.W);
      out.push_back(l.b);
    }
    out.push_back(enc_head_.W);
    out.push_back(enc_head_.b);
    for (const auto& l : dec_) {
      out.push_back(l.W);
      out.push_back(l.b);
    }
    out.push_back(dec_head_.W);
    out.push_back(dec_head_.b);
    return out;
  }

 private:
  int64_t d_, n_;
  Mode mode_;
  std::vector<int64_t> hidden_;
  std::vector<Linear> enc_;
  Linear enc_head_;
  std::vector<Linear> dec_;
  Linear dec_head_;
};

// Eq. 1: sum of squared pixel error per sample, averaged over the batch.
inline Tensor loss_mse(const Tensor& x, const Tensor& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
    throw ValueError(detail::str("loss_mse: shape mismatch ", x.rows(), "x", x.cols(), " vs ",
                                 x_hat.rows(), "x", x_hat.cols()));
  return mul(sum_all(square(sub(x, x_hat))), 1.0 / static_cast<double>(x.rows()));
}

// Eq. 2 as printed: -1/2 sum over batch and coordinates of
// (1 + log sigma^2 - mu^2 - sigma^2); optional batch mean.
inline Tensor loss_kld_standard(const EncoderOutput& e, bool batch_mean = false) {
  Tensor inner = sub(sub(add(e.log_var, 1.0), square(e.mu)), square(e.sigma));
  Tensor out = mul(sum_all(inner), -0.5);
  if (batch_mean) out = mul(out, 1.0 / static_cast<double>(e.mu.rows()));
  return out;
}

struct BatchStats {
  Tensor mean;  // 1 x k
  Tensor std;   // 1 x k, population convention
};

inline BatchStats batch_stats(const Tensor& q) {
  if (q.rows() < 2)
    throw ValueError(detail::str("batch_stats: need batch >= 2, got ", q.rows()));
  return {mean(q, 0), stddev(q, 0)};
}

// Eq. 4: squared batch-mean gaps plus batch variances, summed over the
// Cartesian coordinates, for both heads.
inline Tensor loss_kld_cart_prior(const EncoderOutput& e, const Tensor& prior_mu,
                                  const Tensor& prior_sigma) {
  if (e.mu.rows() < 2)
    throw ValueError(detail::str("loss_kld_cart_prior: need batch >= 2, got ", e.mu.rows()));
  Tensor mu_term = add(square(sub(mean(e.mu, 0), prior_mu)), variance(e.mu, 0));
  Tensor sigma_term = add(square(sub(mean(e.sigma, 0), prior_sigma)), variance(e.sigma, 0));
  return sum_all(add(mu_term, sigma_term));
}

namespace detail {

inline Tensor row_tensor(const std::vector<double>& v) {
  return Tensor::from_data(1, static_cast<int64_t>(v.size()), v);
}

}  // namespace detail

// Eq. 5: gains times squared gaps between the batch statistics of the
// mu- and sigma-cosines and their targets. Differentiable through the
// eps-stabilized transform.
inline Tensor loss_kld_hsph_angles(const EncoderOutput& e, const PriorSpec& p) {
  if (e.mu.rows() < 2)
    throw ValueError(detail::str("loss_kld_hsph_angles: need batch >= 2, got ", e.mu.rows()));
  Tensor alpha = detail::row_tensor(p.alpha_angle);
  Tensor beta = detail::row_tensor(p.beta_angle);
  Tensor cos_mu = cart_to_cos_batched(e.mu, 0.001);
  Tensor cos_sigma = cart_to_cos_batched(e.sigma, 0.001);
  Tensor mu_term = add(mul(alpha, square(sub(mean(cos_mu, 0), detail::row_tensor(p.a_mu_angle)))),
                       mul(beta, square(sub(stddev(cos_mu, 0), detail::row_tensor(p.b_mu_angle)))));
  Tensor sigma_term =
      add(mul(alpha, square(sub(mean(cos_sigma, 0), detail::row_tensor(p.a_sigma_angle)))),
          mul(beta, square(sub(stddev(cos_sigma, 0), detail::row_tensor(p.b_sigma_angle)))));
  return sum_all(add(mu_term, sigma_term));
}

// Eq. 6: the same statistics discipline applied to the row radii of both
// heads, all four terms.
inline Tensor loss_kld_hsph_radius(const EncoderOutput& e, const PriorSpec& p) {
  if (e.mu.rows() < 2)
    throw ValueError(detail::str("loss_kld_hsph_radius: need batch >= 2, got ", e.mu.rows()));
  Tensor r_mu = sqrt_(sum(square(e.mu), 1));
  Tensor r_sigma = sqrt_(sum(square(e.sigma), 1));
  Tensor out = mul(square(sub(mean_all(r_mu), p.a_mu_r)), p.alpha_r);
  out = add(out, mul(square(sub(stddev(r_mu, 0), p.b_mu_r)), p.beta_r));
  out = add(out, mul(square(sub(mean_all(r_sigma), p.a_sigma_r)), p.alpha_r));
  out = add(out, mul(square(sub(stddev(r_sigma, 0), p.b_sigma_r)), p.beta_r));
  return sum_all(out);
}

struct LossBreakdown {
  Tensor total;
  double mse = 0.0;
  double kld_angles = 0.0;  // zero in standard mode
  double kld_radius = 0.0;  // zero in standard mode
  double kld_total = 0.0;
  double beta = 0.0;
};

// Eq. 3 (standard) or Eq. 7 (hyperspherical): MSE plus beta times the KLD
// block for the active mode.
inline LossBreakdown total_loss(const VaeModel& model, const Tensor& x, const Tensor& eps,
                                double beta, const PriorSpec& p, bool kld_batch_mean = false) {
  EncoderOutput e = model.encode(x);
  Tensor z = model.reparameterize(e, eps);
  Tensor x_hat = model.decode(z);
  LossBreakdown out;
  out.beta = beta;
  Tensor mse = loss_mse(x, x_hat);
  out.mse = mse.value();
  if (model.mode() == Mode::standard) {
    Tensor kld = loss_kld_standard(e, kld_batch_mean);
    out.kld_total = kld.value();
    out.total = add(mse, mul(kld, beta));
  } else {
    Tensor kld_a = loss_kld_hsph_angles(e, p);
    Tensor kld_r = loss_kld_hsph_radius(e, p);
    out.kld_angles = kld_a.value();
    out.kld_radius = kld_r.value();
    out.kld_total = out.kld_angles + out.kld_radius;
    out.total = add(mse, mul(add(kld_a, kld_r), beta));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint IO: magic "HSVAE001", little-endian u32 header fields
// (n, d, hidden count, hidden sizes, mode, epoch), a u32-length-prefixed
// note (carries the config fingerprint), then each parameter as
// (rows u32, cols u32, float64 payload) in declaration order.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");

namespace detail {

inline void put_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t get_u32(std::ifstream& f, const std::string& path) {
  uint32_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 4))
    throw DataError(detail::str("load_checkpoint: ", path, " truncated in header"));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const VaeModel& model, int64_t epoch, const std::string& path,
                            const std::string& note = {}) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(detail::str("save_checkpoint: cannot open ", path));
  f.write("HSVAE001", 8);
  detail::put_u32(f, static_cast<uint32_t>(model.latent_dim()));
  detail::put_u32(f, static_cast<uint32_t>(model.data_dim()));
  detail::put_u32(f, static_cast<uint32_t>(model.hidden_sizes().size()));
  for (int64_t h : model.hidden_sizes()) detail::put_u32(f, static_cast<uint32_t>(h));
  detail::put_u32(f, static_cast<uint32_t>(model.mode()));
  detail::put_u32(f, static_cast<uint32_t>(epoch));
  detail::put_u32(f, static_cast<uint32_t>(note.size()));
  f.write(note.data(), static_cast<std::streamsize>(note.size()));
  for (const Tensor& t : model.parameters()) {
    detail::put_u32(f, static_cast<uint32_t>(t.rows()));
    detail::put_u32(f, static_cast<uint32_t>(t.cols()));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  if (!f) throw DataError(detail::str("save_checkpoint: short write to ", path));
}

struct Checkpoint {
  VaeModel model;
  int64_t epoch = 0;
  std::string note;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(detail::str("load_checkpoint: cannot open ", path));
  char magic[8];
  if (!f.read(magic, 8) || std::string(magic, 8) != "HSVAE001")
    throw DataError(detail::str("load_checkpoint: ", path, " has wrong magic (want HSVAE001)"));
  const uint32_t n = detail::get_u32(f, path);
  const uint32_t d = detail::get_u32(f, path);
  const uint32_t hc = detail::get_u32(f, path);
  if (hc == 0 || hc > 16)
    throw DataError(detail::str("load_checkpoint: ", path, " hidden-layer count ", hc, " out of range"));
  std::vector<int64_t> hidden(hc);
  for (auto& h : hidden) h = detail::get_u32(f, path);
  const uint32_t mode_raw = detail::get_u32(f, path);
  if (mode_raw > 1)
    throw DataError(detail::str("load_checkpoint: ", path, " has invalid mode ", mode_raw));
  const uint32_t epoch = detail::get_u32(f, path);
  const uint32_t note_len = detail::get_u32(f, path);
  if (note_len > (1u << 20))
    throw DataError(detail::str("load_checkpoint: ", path, " note length ", note_len,
                                " out of range"));
  std::string note(note_len, '\0');
  if (note_len > 0 && !f.read(note.data(), note_len))
    throw DataError(detail::str("load_checkpoint: ", path, " truncated in note"));
  Checkpoint out{VaeModel(d, n, static_cast<Mode>(mode_raw), 0, hidden),
                 static_cast<int64_t>(epoch), std::move(note)};
  for (Tensor& t : out.model.parameters()) {
    const uint32_t rows = detail::get_u32(f, path);
    const uint32_t cols = detail::get_u32(f, path);
    if (rows != static_cast<uint32_t>(t.rows()) || cols != static_cast<uint32_t>(t.cols()))
      throw DataError(detail::str("load_checkpoint: ", path, " parameter shape ", rows, "x", cols,
                                  " does not match model ", t.rows(), "x", t.cols()));
    auto dst = t.mutable_data();
    if (!f.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.size() * sizeof(double))))
      throw DataError(detail::str("load_checkpoint: ", path, " truncated in parameter payload"));
  }
  f.peek();
  if (!f.eof()) throw DataError(detail::str("load_checkpoint: ", path, " has trailing bytes"));
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic evaluation passes
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor batched_map(const Tensor& rows, int64_t batch,
                          const std::function<Tensor(const Tensor&)>& fn) {
  std::vector<double> out;
  int64_t cols = -1;
  for (int64_t i0 = 0; i0 < rows.rows(); i0 += batch) {
    std::vector<int64_t> idx;
    for (int64_t i = i0; i < std::min(rows.rows(), i0 + batch); ++i) idx.push_back(i);
    Tensor r = fn(gather_rows(rows, idx));
    cols = r.cols();
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return Tensor::from_data(rows.rows(), cols, std::move(out));
}

}  // namespace detail

// Deterministic reconstruction: encode, reparameterize with eps = 0 (the
// posterior mode, projected onto the sphere in hyperspherical mode), decode.
inline Tensor reconstruct(const VaeModel& model, const Tensor& images, int64_t batch = 500) {
  NoGradGuard ng;
  return detail::batched_map(images, batch, [&](const Tensor& x) {
    EncoderOutput e = model.encode(x);
    return model.decode(model.reparameterize(e, Tensor::zeros(x.rows(), model.latent_dim())));
  });
}

inline Tensor encode_latents(const VaeModel& model, const Tensor& images, int64_t batch = 500) {
  NoGradGuard ng;
  return detail::batched_map(images, batch, [&](const Tensor& x) {
    EncoderOutput e = model.encode(x);
    return model.reparameterize(e, Tensor::zeros(x.rows(), model.latent_dim()));
  });
}

struct EpochEval {
  double mse = 0.0;         // full-split deterministic reconstruction MSE
  double kld_angles = 0.0;  // per-batch KLD means at N_b scale
  double kld_radius = 0.0;
  double kld_total = 0.0;
};

// The quantities a log row reports: reconstruction MSE over the whole split
// in one fixed-order pass (so an eval recomputation matches it bit for bit),
// and the KLD terms averaged over the same seeded batch partition the epoch
// trained on (batch statistics only mean something at batch scale).
inline EpochEval evaluate_epoch(const VaeModel& model, const Tensor& images,
                                const TrainConfig& cfg, const PriorSpec& prior, int64_t epoch) {
  NoGradGuard ng;
  EpochEval out;
  out.mse = loss_mse(images, reconstruct(model, images)).value();
  int64_t batches = 0;
  for (const auto& idx : batch_indices(images.rows(), cfg.batch_size, cfg.seed, epoch)) {
    EncoderOutput e = model.encode(gather_rows(images, idx));
    if (model.mode() == Mode::standard) {
      out.kld_total += loss_kld_standard(e, cfg.kld_batch_mean).value();
    } else {
      out.kld_angles += loss_kld_hsph_angles(e, prior).value();
      out.kld_radius += loss_kld_hsph_radius(e, prior).value();
    }
    ++batches;
  }
  out.kld_angles /= static_cast<double>(batches);
  out.kld_radius /= static_cast<double>(batches);
  if (model.mode() == Mode::standard)
    out.kld_total /= static_cast<double>(batches);
  else
    out.kld_total = out.kld_angles + out.kld_radius;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int64_t epoch = 0;
  double mse = 0.0;
  double kld_angles = 0.0;
  double kld_radius = 0.0;
  double kld_total = 0.0;
  double beta = 0.0;
  double seconds = 0.0;
};

inline std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mse,kld_angles,kld_radius,kld_total,beta,seconds\n";
  for (const auto& row : log)
    os << row.epoch << "," << row.mse << "," << row.kld_angles << "," << row.kld_radius << ","
       << row.kld_total << "," << row.beta << "," << row.seconds << "\n";
  return os.str();
}

struct TrainResult {
  VaeModel model;
  std::vector<EpochLog> log;
  std::string checkpoint_path;  // empty when out_dir was empty
};

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const PriorSpec& prior) {
  cfg.validate();
  prior.validate(cfg.n, cfg.mode);
  const int64_t m = ds.images.rows(), d = ds.images.cols();
  if (m < cfg.batch_size)
    throw ValueError(detail::str("train: dataset of ", m, " rows cannot fill one batch of ",
                                 cfg.batch_size));
  TrainResult result{VaeModel(d, cfg.n, cfg.mode, cfg.seed), {}, {}};
  AdamOptimizer opt(result.model.parameters(), {.lr = cfg.lr});
  Rng eps_rng(mix_seed(cfg.seed, 0xe95ULL));

  const std::string ckpt_base =
      cfg.out_dir.empty() ? std::string{}
                          : (std::filesystem::path(cfg.out_dir) /
                             detail::str("vae_", mode_name(cfg.mode), "_n", cfg.n))
                                .string();

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double beta = beta_schedule(epoch, cfg);
    EpochLog row;
    row.epoch = epoch;
    row.beta = beta;
    int64_t batches_done = 0;
    for (const auto& idx : batch_indices(m, cfg.batch_size, cfg.seed, epoch)) {
      Tensor x = gather_rows(ds.images, idx);
      Tensor eps = Tensor::randn(cfg.batch_size, cfg.n, eps_rng);
      try {
        LossBreakdown lb = total_loss(result.model, x, eps, beta, prior, cfg.kld_batch_mean);
        if (!std::isfinite(lb.total.value()))
          throw NumericError("non-finite total loss");
        backward(lb.total);
        opt.step();
      } catch (const NumericError& e) {
        throw NumericError(detail::str("train: epoch ", epoch, ", batch ", batches_done, ": ",
                                       e.what(), "; last checkpoint preserved",
                                       ckpt_base.empty() ? "" : (" at " + ckpt_base + ".ckpt")));
      }
      ++batches_done;
    }
    try {
      EpochEval ev = evaluate_epoch(result.model, ds.images, cfg, prior, epoch);
      row.mse = ev.mse;
      row.kld_angles = ev.kld_angles;
      row.kld_radius = ev.kld_radius;
      row.kld_total = ev.kld_total;
    } catch (const NumericError& e) {
      throw NumericError(detail::str("train: epoch ", epoch, ", evaluation pass: ", e.what(),
                                     "; last checkpoint preserved",
                                     ckpt_base.empty() ? "" : (" at " + ckpt_base + ".ckpt")));
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);

    if (!ckpt_base.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(result.model, epoch + 1, ckpt_base + ".ckpt", cfg.artifact_note);
  }

  if (!ckpt_base.empty()) {
    result.checkpoint_path = ckpt_base + ".ckpt";
    save_checkpoint(result.model, cfg.epochs, result.checkpoint_path, cfg.artifact_note);
    std::ofstream log_file(ckpt_base + "_log.csv", std::ios::trunc);
    if (!cfg.artifact_note.empty()) log_file << "# " << cfg.artifact_note << "\n";
    log_file << epoch_log_csv(result.log);
  }
  return result;
}

// Per-epoch wall-time comparison between the two modes on identical data and
// budgets; `ratio` is hyperspherical seconds over standard seconds.
struct OverheadReport {
  double standard_seconds_per_epoch = 0.0;
  double hyperspherical_seconds_per_epoch = 0.0;
  double ratio = 0.0;
};

inline OverheadReport measure_kld_overhead(const Dataset& ds, TrainConfig cfg,
                                           const PriorSpec& prior, int64_t epochs = 2) {
  cfg.epochs = epochs;
  cfg.out_dir.clear();
  auto mean_seconds = [](const std::vector<EpochLog>& log) {
    double s = 0.0;
    for (const auto& row : log) s += row.seconds;
    return s / static_cast<double>(log.size());
  };
  cfg.mode = Mode::standard;
  const double std_s = mean_seconds(train(ds, cfg, prior).log);
  cfg.mode = Mode::hyperspherical;
  const double hs_s = mean_seconds(train(ds, cfg, prior).log);
  return {std_s, hs_s, hs_s / std_s};
}

}  // namespace hsvae
