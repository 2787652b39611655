// Command line driver. Every command resolves one flat RunConfig from
// defaults -> $HSVAE_CACHE -> config file -> flags, fingerprints it, and
// stamps the fingerprint into each artifact it writes.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/data.hpp"
#include "hsvae/distributions.hpp"
#include "hsvae/image.hpp"
#include "hsvae/metrics.hpp"
#include "hsvae/vae.hpp"

namespace fs = std::filesystem;
using namespace hsvae;

namespace {

// ---------------------------------------------------------------------------
// RunConfig: one flat key = value namespace shared by every command
// ---------------------------------------------------------------------------

struct RunConfig {
  // training
  std::string mode = "standard";  // standard | hyperspherical
  int64_t latent_dim = 128;
  int64_t batch_size = 200;
  double beta_max = 1.0;
  int64_t epochs = 30;
  int64_t anneal_epochs = 100;
  double lr = 1e-3;
  uint64_t seed = 0;
  bool kld_batch_mean = false;
  int64_t checkpoint_every = 0;
  int64_t train_count = 0;  // 0 = whole split
  int64_t test_count = 0;
  // paths and data access
  std::string cache_dir;
  std::string out_dir = "out";
  bool offline = false;
  std::string checkpoint;  // empty = <out_dir>/vae_<mode>_n<latent_dim>.ckpt
  std::string proxy_weights = "assets/proxy_mnist.ckpt";
  int64_t proxy_epochs = 4;
  // generate
  int64_t gen_count = 64;
  std::string source = "prior";  // prior | vmf
  std::string format = "png";    // png | pgm
  std::string reference_latents;
  // eval
  std::string eval_split = "test";  // test | train
  std::string metrics = "mse,knn,self_fid,concentration";
  int64_t knn_k = 5;
  int64_t knn_train_count = 10000;  // 0 = whole split
  int64_t knn_test_count = 2000;
  int64_t fid_count = 10000;  // capped at the scored split size
  // project
  std::string groups;  // "a,b,c"; empty = near-equal split of latent_dim
  // sweep
  std::string beta_list;
  std::string n_list;
  // prior overrides; unset = compression_prior(latent_dim) defaults
  std::optional<double> prior_a_mu_angle, prior_b_mu_angle;
  std::optional<double> prior_a_sigma_angle, prior_b_sigma_angle;
  std::optional<double> prior_a_mu_r, prior_a_sigma_r, prior_b_mu_r, prior_b_sigma_r;
  std::optional<double> prior_alpha_r, prior_beta_r;

  RunConfig() {
    if (const char* env = std::getenv("HSVAE_CACHE")) {
      cache_dir = env;
    } else {
      const char* home = std::getenv("HOME");
      cache_dir = std::string(home ? home : ".") + "/.cache/hsvae/mnist";
    }
  }
};

int64_t parse_int(const std::string& v, const std::string& ctx, const std::string& key) {
  try {
    size_t used = 0;
    const int64_t out = std::stoll(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(detail::str(ctx, ": key '", key, "': invalid integer '", v, "'"));
}

uint64_t parse_u64(const std::string& v, const std::string& ctx, const std::string& key) {
  try {
    size_t used = 0;
    const uint64_t out = std::stoull(v, &used);
    if (used == v.size() && v.find('-') == std::string::npos) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(detail::str(ctx, ": key '", key, "': invalid unsigned integer '", v, "'"));
}

double parse_real(const std::string& v, const std::string& ctx, const std::string& key) {
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(detail::str(ctx, ": key '", key, "': invalid real '", v, "'"));
}

bool parse_bool(const std::string& v, const std::string& ctx, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(detail::str(ctx, ": key '", key, "': invalid bool '", v,
                                "' (want true/false/1/0)"));
}

void require_choice(const std::string& v, std::initializer_list<const char*> allowed,
                    const std::string& ctx, const std::string& key) {
  for (const char* a : allowed)
    if (v == a) return;
  std::ostringstream os;
  os << ctx << ": key '" << key << "': invalid value '" << v << "' (want";
  for (const char* a : allowed) os << " " << a;
  os << ")";
  throw ConfigError(os.str());
}

// One assignment from file or flag; `ctx` names the source for diagnostics
// ("config.cfg:12" or "flag --beta-max"). Unknown keys are rejected here.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value,
               const std::string& ctx) {
  auto opt_real = [&](std::optional<double>& slot) { slot = parse_real(value, ctx, key); };
  if (key == "mode") {
    require_choice(value, {"standard", "hyperspherical"}, ctx, key);
    cfg.mode = value;
  } else if (key == "latent_dim") {
    cfg.latent_dim = parse_int(value, ctx, key);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_int(value, ctx, key);
  } else if (key == "beta_max") {
    cfg.beta_max = parse_real(value, ctx, key);
  } else if (key == "epochs") {
    cfg.epochs = parse_int(value, ctx, key);
  } else if (key == "anneal_epochs") {
    cfg.anneal_epochs = parse_int(value, ctx, key);
  } else if (key == "lr") {
    cfg.lr = parse_real(value, ctx, key);
  } else if (key == "seed") {
    cfg.seed = parse_u64(value, ctx, key);
  } else if (key == "kld_batch_mean") {
    cfg.kld_batch_mean = parse_bool(value, ctx, key);
  } else if (key == "checkpoint_every") {
    cfg.checkpoint_every = parse_int(value, ctx, key);
  } else if (key == "train_count") {
    cfg.train_count = parse_int(value, ctx, key);
  } else if (key == "test_count") {
    cfg.test_count = parse_int(value, ctx, key);
  } else if (key == "cache_dir") {
    cfg.cache_dir = value;
  } else if (key == "out_dir") {
    cfg.out_dir = value;
  } else if (key == "offline") {
    cfg.offline = parse_bool(value, ctx, key);
  } else if (key == "checkpoint") {
    cfg.checkpoint = value;
  } else if (key == "proxy_weights") {
    cfg.proxy_weights = value;
  } else if (key == "proxy_epochs") {
    cfg.proxy_epochs = parse_int(value, ctx, key);
  } else if (key == "gen_count") {
    cfg.gen_count = parse_int(value, ctx, key);
  } else if (key == "source") {
    require_choice(value, {"prior", "vmf"}, ctx, key);
    cfg.source = value;
  } else if (key == "format") {
    require_choice(value, {"png", "pgm"}, ctx, key);
    cfg.format = value;
  } else if (key == "reference_latents") {
    cfg.reference_latents = value;
  } else if (key == "eval_split") {
    require_choice(value, {"test", "train"}, ctx, key);
    cfg.eval_split = value;
  } else if (key == "metrics") {
    cfg.metrics = value;
  } else if (key == "knn_k") {
    cfg.knn_k = parse_int(value, ctx, key);
  } else if (key == "knn_train_count") {
    cfg.knn_train_count = parse_int(value, ctx, key);
  } else if (key == "knn_test_count") {
    cfg.knn_test_count = parse_int(value, ctx, key);
  } else if (key == "fid_count") {
    cfg.fid_count = parse_int(value, ctx, key);
  } else if (key == "groups") {
    cfg.groups = value;
  } else if (key == "beta_list") {
    cfg.beta_list = value;
  } else if (key == "n_list") {
    cfg.n_list = value;
  } else if (key == "prior.a_mu_angle") {
    opt_real(cfg.prior_a_mu_angle);
  } else if (key == "prior.b_mu_angle") {
    opt_real(cfg.prior_b_mu_angle);
  } else if (key == "prior.a_sigma_angle") {
    opt_real(cfg.prior_a_sigma_angle);
  } else if (key == "prior.b_sigma_angle") {
    opt_real(cfg.prior_b_sigma_angle);
  } else if (key == "prior.a_mu_r") {
    opt_real(cfg.prior_a_mu_r);
  } else if (key == "prior.a_sigma_r") {
    opt_real(cfg.prior_a_sigma_r);
  } else if (key == "prior.b_mu_r") {
    opt_real(cfg.prior_b_mu_r);
  } else if (key == "prior.b_sigma_r") {
    opt_real(cfg.prior_b_sigma_r);
  } else if (key == "prior.alpha_r") {
    opt_real(cfg.prior_alpha_r);
  } else if (key == "prior.beta_r") {
    opt_real(cfg.prior_beta_r);
  } else {
    throw ConfigError(detail::str(ctx, ": unknown key '", key, "'"));
  }
}

// Flat `key = value` file; '#' starts a comment, later duplicates win.
void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(detail::str("cannot open config file ", path));
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string ctx = detail::str(path, ":", lineno);
    if (const size_t hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string{};
      const size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(detail::str(ctx, ": expected 'key = value', got '", trim(line), "'"));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(detail::str(ctx, ": empty key"));
    apply_key(cfg, key, value, ctx);
  }
}

std::string real_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string opt_str(const std::optional<double>& v) {
  return v ? real_str(*v) : std::string("default");
}

// Canonical serialization of the fully resolved configuration; its SHA-256
// prefix is the fingerprint stamped into every artifact.
std::string config_dump(const RunConfig& c) {
  std::ostringstream os;
  os << "anneal_epochs = " << c.anneal_epochs << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "beta_list = " << c.beta_list << "\n"
     << "beta_max = " << real_str(c.beta_max) << "\n"
     << "cache_dir = " << c.cache_dir << "\n"
     << "checkpoint = " << c.checkpoint << "\n"
     << "checkpoint_every = " << c.checkpoint_every << "\n"
     << "epochs = " << c.epochs << "\n"
     << "eval_split = " << c.eval_split << "\n"
     << "fid_count = " << c.fid_count << "\n"
     << "format = " << c.format << "\n"
     << "gen_count = " << c.gen_count << "\n"
     << "groups = " << c.groups << "\n"
     << "kld_batch_mean = " << (c.kld_batch_mean ? "true" : "false") << "\n"
     << "knn_k = " << c.knn_k << "\n"
     << "knn_test_count = " << c.knn_test_count << "\n"
     << "knn_train_count = " << c.knn_train_count << "\n"
     << "latent_dim = " << c.latent_dim << "\n"
     << "lr = " << real_str(c.lr) << "\n"
     << "metrics = " << c.metrics << "\n"
     << "mode = " << c.mode << "\n"
     << "n_list = " << c.n_list << "\n"
     << "offline = " << (c.offline ? "true" : "false") << "\n"
     << "out_dir = " << c.out_dir << "\n"
     << "prior.a_mu_angle = " << opt_str(c.prior_a_mu_angle) << "\n"
     << "prior.a_mu_r = " << opt_str(c.prior_a_mu_r) << "\n"
     << "prior.a_sigma_angle = " << opt_str(c.prior_a_sigma_angle) << "\n"
     << "prior.a_sigma_r = " << opt_str(c.prior_a_sigma_r) << "\n"
     << "prior.alpha_r = " << opt_str(c.prior_alpha_r) << "\n"
     << "prior.b_mu_angle = " << opt_str(c.prior_b_mu_angle) << "\n"
     << "prior.b_mu_r = " << opt_str(c.prior_b_mu_r) << "\n"
     << "prior.b_sigma_angle = " << opt_str(c.prior_b_sigma_angle) << "\n"
     << "prior.b_sigma_r = " << opt_str(c.prior_b_sigma_r) << "\n"
     << "prior.beta_r = " << opt_str(c.prior_beta_r) << "\n"
     << "proxy_epochs = " << c.proxy_epochs << "\n"
     << "proxy_weights = " << c.proxy_weights << "\n"
     << "reference_latents = " << c.reference_latents << "\n"
     << "seed = " << c.seed << "\n"
     << "source = " << c.source << "\n"
     << "test_count = " << c.test_count << "\n"
     << "train_count = " << c.train_count << "\n";
  return os.str();
}

std::string fingerprint(const RunConfig& cfg) {
  const std::string dump = config_dump(cfg);
  return sha256_hex(reinterpret_cast<const unsigned char*>(dump.data()), dump.size())
      .substr(0, 16);
}

// ---------------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------------

Dataset head_rows(const Dataset& ds, int64_t count) {
  std::vector<int64_t> idx(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = i;
  Dataset out;
  out.images = gather_rows(ds.images, idx);
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + count);
  return out;
}

Dataset load_split(const RunConfig& cfg, bool train_split) {
  Dataset ds = fetch_dataset(cfg.cache_dir,
                             train_split ? mnist_train_source() : mnist_test_source(),
                             cfg.offline);
  const int64_t want = train_split ? cfg.train_count : cfg.test_count;
  if (want < 0 || want > ds.images.rows())
    throw ConfigError(detail::str(train_split ? "train_count " : "test_count ", want,
                                  " outside [0, ", ds.images.rows(), "]"));
  if (want > 0 && want < ds.images.rows()) return head_rows(ds, want);
  return ds;
}

TrainConfig to_train_config(const RunConfig& cfg, const std::string& fp) {
  TrainConfig tc;
  tc.n = cfg.latent_dim;
  tc.batch_size = cfg.batch_size;
  tc.beta_max = cfg.beta_max;
  tc.epochs = cfg.epochs;
  tc.anneal_epochs = cfg.anneal_epochs;
  tc.mode = mode_from_name(cfg.mode);
  tc.seed = cfg.seed;
  tc.lr = cfg.lr;
  tc.kld_batch_mean = cfg.kld_batch_mean;
  tc.checkpoint_every = cfg.checkpoint_every;
  tc.out_dir = cfg.out_dir;
  tc.artifact_note = "config_fingerprint=" + fp;
  return tc;
}

PriorSpec make_prior(const RunConfig& cfg, int64_t n) {
  PriorSpec p = compression_prior(n);
  const size_t m = static_cast<size_t>(n - 1);
  if (cfg.prior_a_mu_angle) p.a_mu_angle.assign(m, *cfg.prior_a_mu_angle);
  if (cfg.prior_b_mu_angle) p.b_mu_angle.assign(m, *cfg.prior_b_mu_angle);
  if (cfg.prior_a_sigma_angle) p.a_sigma_angle.assign(m, *cfg.prior_a_sigma_angle);
  if (cfg.prior_b_sigma_angle) p.b_sigma_angle.assign(m, *cfg.prior_b_sigma_angle);
  if (cfg.prior_a_mu_r) p.a_mu_r = *cfg.prior_a_mu_r;
  if (cfg.prior_a_sigma_r) p.a_sigma_r = *cfg.prior_a_sigma_r;
  if (cfg.prior_b_mu_r) p.b_mu_r = *cfg.prior_b_mu_r;
  if (cfg.prior_b_sigma_r) p.b_sigma_r = *cfg.prior_b_sigma_r;
  if (cfg.prior_alpha_r) p.alpha_r = *cfg.prior_alpha_r;
  if (cfg.prior_beta_r) p.beta_r = *cfg.prior_beta_r;
  return p;
}

std::string resolve_checkpoint_path(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) return cfg.checkpoint;
  return (fs::path(cfg.out_dir) /
          detail::str("vae_", cfg.mode, "_n", cfg.latent_dim, ".ckpt"))
      .string();
}

void write_text(const std::string& path, const std::string& content) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(detail::str("cannot open ", path, " for writing"));
  f << content;
  if (!f) throw DataError(detail::str("short write to ", path));
}

// Appends rows to a metrics CSV, creating it with the pinned header first;
// each run's rows are preceded by its fingerprint comment.
void append_metrics(const std::string& path, const std::string& fp,
                    const std::string& rows) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const bool fresh = !fs::exists(p);
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError(detail::str("cannot open ", path, " for appending"));
  if (fresh) f << metrics_csv_header();
  f << "# config_fingerprint=" << fp << "\n" << rows;
  if (!f) throw DataError(detail::str("short write to ", path));
}

std::string latents_csv(const Tensor& latents, const std::string& fp) {
  std::ostringstream os;
  os.precision(17);
  os << "# config_fingerprint=" << fp << "\n";
  for (int64_t j = 0; j < latents.cols(); ++j) os << (j ? "," : "") << "z" << j;
  os << "\n";
  for (int64_t i = 0; i < latents.rows(); ++i) {
    for (int64_t j = 0; j < latents.cols(); ++j) os << (j ? "," : "") << latents.at(i, j);
    os << "\n";
  }
  return os.str();
}

// Reads a latent CSV back: '#' comments and one optional header line are
// skipped, every remaining line is a comma-separated row of reals.
Tensor read_latents_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(detail::str("cannot open reference latents ", path));
  std::vector<double> values;
  int64_t rows = 0, cols = -1;
  std::string line;
  int lineno = 0;
  bool header_allowed = true;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (header_allowed && line.find_first_not_of("0123456789+-.eE, \r") != std::string::npos) {
      header_allowed = false;
      continue;
    }
    header_allowed = false;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size() && cell.find_first_not_of(" \r", used) != std::string::npos)
          throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError(detail::str(path, ":", lineno, ": invalid real '", cell, "'"));
      }
    }
    if (cols < 0) cols = static_cast<int64_t>(row.size());
    if (static_cast<int64_t>(row.size()) != cols)
      throw DataError(detail::str(path, ":", lineno, ": expected ", cols, " columns, got ",
                                  row.size()));
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0) throw DataError(detail::str(path, ": no latent rows"));
  return Tensor::from_data(rows, cols, std::move(values));
}

std::vector<double> parse_real_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string cell;
  while (std::getline(ss, cell, ','))
    out.push_back(parse_real(cell, "list", key));
  if (out.empty()) throw ConfigError(detail::str("key '", key, "' needs a comma-separated list"));
  return out;
}

Tensor decode_latents(const VaeModel& model, const Tensor& z) {
  NoGradGuard ng;
  return detail::batched_map(z, 500, [&](const Tensor& zb) { return model.decode(zb); });
}

double deterministic_mse(const VaeModel& model, const Tensor& images) {
  NoGradGuard ng;
  return loss_mse(images, reconstruct(model, images)).value();
}

// Mode-matched latent source: the standard prior, or a vMF fitted to
// reference latents (a file when given, else the training embedding).
Tensor sampled_latents_for(const RunConfig& cfg, const VaeModel& model, int64_t count,
                           const Dataset* train_split) {
  if (model.mode() == Mode::standard)
    return sample_prior_latents(count, model.latent_dim(), cfg.seed);
  Tensor reference;
  if (!cfg.reference_latents.empty()) {
    reference = read_latents_csv(cfg.reference_latents);
  } else {
    if (train_split == nullptr)
      throw ConfigError("vmf sampling needs reference_latents or the training split");
    const int64_t cap = std::min<int64_t>(train_split->images.rows(), 10000);
    reference = encode_latents(model, head_rows(*train_split, cap).images);
  }
  if (reference.cols() != model.latent_dim())
    throw ValueError(detail::str("reference latents have dimension ", reference.cols(),
                                 ", model wants ", model.latent_dim()));
  return sample_vmf_latents(reference, count, cfg.seed);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  Dataset tr = load_split(cfg, true);
  TrainConfig tc = to_train_config(cfg, fp);
  PriorSpec prior = make_prior(cfg, tc.n);
  TrainResult res = train(tr, tc, prior);

  double total_s = 0.0;
  for (const auto& row : res.log) total_s += row.seconds;
  const double mean_s = total_s / static_cast<double>(res.log.size());

  // Wall-time calibration of the hyperspherical KLD path against the
  // standard one, on a small slice with the canonical compression prior.
  const int64_t calib_rows = std::min<int64_t>(tr.images.rows(), 10 * tc.batch_size);
  OverheadReport ov =
      measure_kld_overhead(head_rows(tr, calib_rows), tc, compression_prior(tc.n));

  std::ostringstream timing;
  timing.precision(6);
  timing << "# config_fingerprint=" << fp << "\n"
         << "trained_mode=" << cfg.mode << "\n"
         << "epochs=" << tc.epochs << "\n"
         << "mean_epoch_seconds=" << mean_s << "\n"
         << "total_seconds=" << total_s << "\n"
         << "calibration_rows=" << calib_rows << "\n"
         << "calibration_epochs=2\n"
         << "standard_seconds_per_epoch=" << ov.standard_seconds_per_epoch << "\n"
         << "hyperspherical_seconds_per_epoch=" << ov.hyperspherical_seconds_per_epoch << "\n"
         << "kld_overhead_pct=" << (ov.ratio - 1.0) * 100.0 << "\n";
  const std::string timing_path =
      (fs::path(cfg.out_dir) / detail::str("vae_", cfg.mode, "_n", tc.n, "_timing.txt")).string();
  write_text(timing_path, timing.str());

  std::cout.precision(12);
  std::cout << "checkpoint: " << res.checkpoint_path << "\n"
            << "final mse: " << res.log.back().mse << "\n"
            << "mean epoch seconds: " << mean_s << "\n"
            << "kld-path overhead: " << (ov.ratio - 1.0) * 100.0 << "%\n"
            << "timing summary: " << timing_path << "\n";
  return 0;
}

int cmd_train_proxy(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  Dataset tr = load_split(cfg, true);
  Dataset te = load_split(cfg, false);
  ProxyTrainResult res = train_proxy(tr, te, cfg.proxy_epochs, cfg.seed);
  save_proxy(res.proxy, cfg.proxy_weights, "config_fingerprint=" + fp);
  std::cout.precision(6);
  for (size_t e = 0; e < res.test_accuracy.size(); ++e)
    std::cout << "epoch " << e << " test accuracy: " << res.test_accuracy[e] << "\n";
  std::cout << "weights: " << cfg.proxy_weights << "\n";
  if (res.test_accuracy.back() < 0.97)
    std::cerr << "warning: final accuracy " << res.test_accuracy.back()
              << " is below the 0.97 bar for a pinned extractor; train longer\n";
  return 0;
}

int cmd_generate(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  const std::string ckpt_path = resolve_checkpoint_path(cfg);
  Checkpoint ck = load_checkpoint(ckpt_path);
  const VaeModel& model = ck.model;
  if (cfg.gen_count < 1)
    throw ConfigError(detail::str("gen_count must be >= 1, got ", cfg.gen_count));

  Tensor z;
  if (cfg.source == "prior") {
    z = sample_prior_latents(cfg.gen_count, model.latent_dim(), cfg.seed);
  } else {
    if (cfg.reference_latents.empty())
      throw ConfigError(
          "source=vmf needs reference_latents (a latent CSV; the project command writes one)");
    Tensor ref = read_latents_csv(cfg.reference_latents);
    if (ref.cols() != model.latent_dim())
      throw ValueError(detail::str("reference latents have dimension ", ref.cols(),
                                   ", checkpoint wants ", model.latent_dim()));
    const VmfParams fit = fit_vmf(ref);
    std::cout.precision(12);
    std::cout << "vmf fit: kappa=" << fit.kappa << (fit.kappa_capped ? " (capped)" : "") << "\n";
    z = sample_vmf_latents(ref, cfg.gen_count, cfg.seed);
  }

  Tensor imgs = decode_latents(model, z);
  ImageGrid grid = make_grid(imgs);
  const std::string base =
      (fs::path(cfg.out_dir) /
       detail::str("generated_", cfg.source, "_", mode_name(model.mode()), "_n",
                   model.latent_dim()))
          .string();
  const std::string note = "config_fingerprint=" + fp;
  const std::string img_path = base + (cfg.format == "png" ? ".png" : ".pgm");
  fs::create_directories(fs::path(cfg.out_dir));
  if (cfg.format == "png")
    write_png(grid, img_path, note);
  else
    write_pgm(grid, img_path, note);
  write_text(base + "_latents.csv", latents_csv(z, fp));
  std::cout << "grid: " << img_path << "\n"
            << "latents: " << base + "_latents.csv" << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  const std::string ckpt_path = resolve_checkpoint_path(cfg);
  Checkpoint ck = load_checkpoint(ckpt_path);
  const VaeModel& model = ck.model;

  std::vector<std::string> wanted;
  std::stringstream ss(cfg.metrics);
  std::string cell;
  while (std::getline(ss, cell, ','))
    if (!cell.empty()) wanted.push_back(cell);
  if (wanted.empty()) throw ConfigError("eval: empty metrics list");
  for (const std::string& m : wanted)
    require_choice(m, {"mse", "knn", "self_fid", "concentration"}, "eval", "metrics");
  const auto requested = [&](const char* name) {
    for (const std::string& m : wanted)
      if (m == name) return true;
    return false;
  };

  Dataset scored = load_split(cfg, cfg.eval_split == "train");
  std::ostringstream rows;
  std::cout.precision(12);

  if (requested("mse")) {
    const double mse = deterministic_mse(model, scored.images);
    rows << metrics_csv_row("mse", model.mode(), model.latent_dim(), cfg.beta_max, mse,
                            scored.images.rows(), cfg.seed);
    std::cout << "mse(" << cfg.eval_split << "): " << mse << "\n";
  }

  if (requested("knn")) {
    Dataset tr = load_split(cfg, true);
    Dataset te = load_split(cfg, false);
    if (cfg.knn_train_count > 0 && cfg.knn_train_count < tr.images.rows())
      tr = head_rows(tr, cfg.knn_train_count);
    if (cfg.knn_test_count > 0 && cfg.knn_test_count < te.images.rows())
      te = head_rows(te, cfg.knn_test_count);
    Tensor lat_tr = encode_latents(model, tr.images);
    Tensor lat_te = encode_latents(model, te.images);
    const double acc = knn_accuracy(lat_tr, tr.labels, lat_te, te.labels, cfg.knn_k);
    rows << metrics_csv_row("knn", model.mode(), model.latent_dim(), cfg.beta_max, acc,
                            te.images.rows(), cfg.seed);
    std::cout << "knn accuracy (k=" << cfg.knn_k << "): " << acc << "\n";
  }

  if (requested("self_fid")) {
    ProxyClassifier proxy = load_proxy(cfg.proxy_weights);
    Dataset te = cfg.eval_split == "test" ? scored : load_split(cfg, false);
    const int64_t count = std::min<int64_t>(cfg.fid_count, te.images.rows());
    Dataset tr_for_ref;
    const Dataset* tr_ptr = nullptr;
    if (model.mode() == Mode::hyperspherical && cfg.reference_latents.empty()) {
      tr_for_ref = load_split(cfg, true);
      tr_ptr = &tr_for_ref;
    }
    Tensor z = sampled_latents_for(cfg, model, count, tr_ptr);
    SelfFidResult sf = self_fid_proxy(model, te.images, z, proxy, count);
    if (sf.regularized)
      std::cerr << "warning: degenerate feature covariance, +1e-6 I ridge applied\n";
    rows << metrics_csv_row("self_fid_proxy", model.mode(), model.latent_dim(), cfg.beta_max,
                            sf.value, count, cfg.seed);
    std::cout << "self-fid (proxy, "
              << (model.mode() == Mode::standard ? "prior" : "vmf") << " sampling): " << sf.value
              << "\n";
  }

  if (requested("concentration")) {
    Tensor lat = encode_latents(model, scored.images);
    ConcentrationReport rep = concentration_report(lat);
    const std::string path =
        (fs::path(cfg.out_dir) /
         detail::str("concentration_", mode_name(model.mode()), "_n", model.latent_dim(), ".csv"))
            .string();
    write_text(path, detail::str("# config_fingerprint=", fp, "\n", rep.to_csv()));
    const double shell = rep.norm_mean > 0 ? rep.norm_std / rep.norm_mean : 0.0;
    rows << metrics_csv_row("concentration_shell", model.mode(), model.latent_dim(),
                            cfg.beta_max, shell, scored.images.rows(), cfg.seed);
    std::cout << "concentration report: " << path << " (shell thickness " << shell << ")\n";
  }

  const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  append_metrics(metrics_path, fp, rows.str());
  std::cout << "metrics: " << metrics_path << "\n";
  return 0;
}

int cmd_project(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  const std::string ckpt_path = resolve_checkpoint_path(cfg);
  Checkpoint ck = load_checkpoint(ckpt_path);
  const VaeModel& model = ck.model;
  Dataset te = load_split(cfg, false);
  Tensor lat = encode_latents(model, te.images);

  Projection3D proj;
  if (cfg.groups.empty()) {
    proj = project_3sphere(lat);
  } else {
    const std::vector<double> g = parse_real_list(cfg.groups, "groups");
    if (g.size() != 3)
      throw ConfigError(detail::str("groups needs exactly 3 entries, got ", g.size()));
    proj = project_3sphere(lat, {static_cast<int64_t>(g[0]), static_cast<int64_t>(g[1]),
                                 static_cast<int64_t>(g[2])});
  }

  const std::string proj_path =
      (fs::path(cfg.out_dir) /
       detail::str("projection_", mode_name(model.mode()), "_n", model.latent_dim(), ".csv"))
          .string();
  write_text(proj_path,
             detail::str("# config_fingerprint=", fp, "\n", projection_csv(proj, te.labels)));
  const std::string lat_path =
      (fs::path(cfg.out_dir) /
       detail::str("latents_", mode_name(model.mode()), "_n", model.latent_dim(), ".csv"))
          .string();
  write_text(lat_path, latents_csv(lat, fp));

  std::cout << "projection: " << proj_path << " (" << proj.points.rows() << " rows, dropped "
            << proj.dropped << " zero-norm rows)\n"
            << "latents: " << lat_path << "\n";
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  const std::string fp = fingerprint(cfg);
  std::cout << "config_fingerprint=" << fp << "\n";
  if (cfg.beta_list.empty() || cfg.n_list.empty())
    throw ConfigError("sweep needs beta_list and n_list");
  const std::vector<double> betas = parse_real_list(cfg.beta_list, "beta_list");
  const std::vector<double> ns_raw = parse_real_list(cfg.n_list, "n_list");
  std::vector<int64_t> ns;
  for (double v : ns_raw) {
    if (v < 2 || v != std::floor(v))
      throw ConfigError(detail::str("n_list entry ", v, " is not an integer >= 2"));
    ns.push_back(static_cast<int64_t>(v));
  }
  ProxyClassifier proxy = load_proxy(cfg.proxy_weights);
  Dataset tr = load_split(cfg, true);
  Dataset te = load_split(cfg, false);

  const std::string sweep_path = (fs::path(cfg.out_dir) / "sweep.csv").string();
  fs::create_directories(fs::path(cfg.out_dir));
  const bool fresh = !fs::exists(sweep_path);
  std::ofstream out(sweep_path, std::ios::app);
  if (!out) throw DataError(detail::str("cannot open ", sweep_path, " for appending"));
  if (fresh) out << "mode,beta,n,mse,self_fid_proxy\n";
  out << "# config_fingerprint=" << fp << "\n";
  out.precision(17);
  std::cout.precision(12);

  int failures = 0;
  for (const char* mode : {"standard", "hyperspherical"}) {
    for (double beta : betas) {
      for (int64_t n : ns) {
        const std::string label = detail::str(mode, "_beta", beta, "_n", n);
        try {
          RunConfig cell = cfg;
          cell.mode = mode;
          cell.beta_max = beta;
          cell.latent_dim = n;
          cell.out_dir = (fs::path(cfg.out_dir) / "sweep" / label).string();
          TrainConfig tc = to_train_config(cell, fp);
          PriorSpec prior = make_prior(cell, n);
          TrainResult res = train(tr, tc, prior);
          const double mse = deterministic_mse(res.model, te.images);
          const int64_t count = std::min<int64_t>(cfg.fid_count, te.images.rows());
          Tensor z = sampled_latents_for(cell, res.model, count, &tr);
          SelfFidResult sf = self_fid_proxy(res.model, te.images, z, proxy, count);
          out << mode << "," << beta << "," << n << "," << mse << "," << sf.value << "\n";
          out.flush();
          std::cout << label << ": mse=" << mse << " self_fid=" << sf.value << "\n";
        } catch (const std::exception& e) {
          out << "# cell " << label << " failed: " << e.what() << "\n"
              << mode << "," << beta << "," << n << ",nan,nan\n";
          out.flush();
          std::cerr << "cell " << label << " failed: " << e.what() << "\n";
          ++failures;
        }
      }
    }
  }
  std::cout << "sweep: " << sweep_path << (failures ? detail::str(" (", failures, " cells failed)")
                                                    : std::string{})
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring
// ---------------------------------------------------------------------------

struct PendingArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;  // key, value
};

void add_value_flag(CLI::App* sub, PendingArgs& pending, const std::string& flag,
                    const std::string& key, const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&pending, key](const std::string& v) { pending.overrides.emplace_back(key, v); },
      help);
}

void add_bool_flag(CLI::App* sub, PendingArgs& pending, const std::string& flag,
                   const std::string& key, const std::string& help) {
  sub->add_flag_callback(
      flag, [&pending, key] { pending.overrides.emplace_back(key, "true"); }, help);
}

void add_common_flags(CLI::App* sub, PendingArgs& pending) {
  sub->add_option("--config", pending.config_path, "flat key = value config file");
  add_value_flag(sub, pending, "--cache-dir", "cache_dir",
                 "dataset cache (default $HSVAE_CACHE or ~/.cache/hsvae/mnist)");
  add_value_flag(sub, pending, "--out", "out_dir", "output directory (default out)");
  add_value_flag(sub, pending, "--seed", "seed", "RNG seed (default 0)");
  add_bool_flag(sub, pending, "--offline", "offline", "never touch the network");
}

const char* config_key_reference() {
  return R"(Config file keys (flat `key = value`, '#' comments; flags override the file,
the file overrides $HSVAE_CACHE, which overrides defaults):

  mode = standard                   standard | hyperspherical
  latent_dim = 128                  n
  batch_size = 200                  N_b (full batches only)
  beta_max = 1.0                    KLD gain ceiling
  epochs = 30
  anneal_epochs = 100               sqrt warmup length for beta
  lr = 0.001                        Adam learning rate
  seed = 0
  kld_batch_mean = false            mean instead of sum over the batch in Eq. 2
  checkpoint_every = 0              0 = final checkpoint only
  train_count = 0                   0 = whole split, else first K rows
  test_count = 0
  cache_dir = ~/.cache/hsvae/mnist  dataset cache ($HSVAE_CACHE honored)
  out_dir = out
  offline = false                   cache-only data access
  checkpoint =                      empty = <out_dir>/vae_<mode>_n<latent_dim>.ckpt
  proxy_weights = assets/proxy_mnist.ckpt
  proxy_epochs = 4
  gen_count = 64                    images per generated grid
  source = prior                    prior | vmf latent sampling
  format = png                      png | pgm grid output
  reference_latents =               latent CSV fitted by source=vmf
  eval_split = test                 test | train split scored by eval
  metrics = mse,knn,self_fid,concentration
  knn_k = 5                         odd neighbor count
  knn_train_count = 10000           0 = whole split
  knn_test_count = 2000
  fid_count = 10000                 capped at the scored split size
  groups =                          three comma ints for project (default near-equal)
  beta_list =                       sweep beta grid, comma reals
  n_list =                          sweep n grid, comma ints
  prior.a_mu_angle, prior.b_mu_angle, prior.a_sigma_angle, prior.b_sigma_angle
                                    scalar broadcast over all n-1 angle targets
  prior.a_mu_r, prior.a_sigma_r, prior.b_mu_r, prior.b_sigma_r,
  prior.alpha_r, prior.beta_r       radius targets and gains
                                    (all prior.* default to the compression prior)
)";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsvae: hyperspherical-coordinate VAE trainer, generator, and evaluator"};
  app.require_subcommand(1);
  app.footer(config_key_reference());

  PendingArgs pending;

  CLI::App* train_cmd = app.add_subcommand("train", "train a VAE, write checkpoint + log CSV");
  add_common_flags(train_cmd, pending);
  add_value_flag(train_cmd, pending, "--mode", "mode", "standard | hyperspherical");
  add_value_flag(train_cmd, pending, "--latent-dim", "latent_dim", "latent dimension n");
  add_value_flag(train_cmd, pending, "--batch-size", "batch_size", "mini-batch size N_b");
  add_value_flag(train_cmd, pending, "--beta-max", "beta_max", "KLD gain ceiling");
  add_value_flag(train_cmd, pending, "--epochs", "epochs", "training epochs");
  add_value_flag(train_cmd, pending, "--anneal-epochs", "anneal_epochs", "beta warmup epochs");
  add_value_flag(train_cmd, pending, "--lr", "lr", "Adam learning rate");
  add_value_flag(train_cmd, pending, "--train-count", "train_count", "first K training rows");
  add_value_flag(train_cmd, pending, "--checkpoint-every", "checkpoint_every",
                 "periodic checkpoint stride");
  add_bool_flag(train_cmd, pending, "--kld-batch-mean", "kld_batch_mean",
                "average Eq. 2 over the batch");

  CLI::App* proxy_cmd =
      app.add_subcommand("train-proxy", "train the proxy feature extractor, save weights");
  add_common_flags(proxy_cmd, pending);
  add_value_flag(proxy_cmd, pending, "--proxy-weights", "proxy_weights", "weights output path");
  add_value_flag(proxy_cmd, pending, "--epochs", "proxy_epochs", "proxy training epochs");
  add_value_flag(proxy_cmd, pending, "--train-count", "train_count", "first K training rows");
  add_value_flag(proxy_cmd, pending, "--test-count", "test_count", "first K test rows");

  CLI::App* gen_cmd =
      app.add_subcommand("generate", "decode sampled latents into an image grid + latent CSV");
  add_common_flags(gen_cmd, pending);
  add_value_flag(gen_cmd, pending, "--checkpoint", "checkpoint", "checkpoint to decode with");
  add_value_flag(gen_cmd, pending, "--mode", "mode", "picks the default checkpoint name");
  add_value_flag(gen_cmd, pending, "--latent-dim", "latent_dim",
                 "picks the default checkpoint name");
  add_value_flag(gen_cmd, pending, "--count", "gen_count", "images to generate");
  add_value_flag(gen_cmd, pending, "--source", "source", "prior | vmf latent sampling");
  add_value_flag(gen_cmd, pending, "--format", "format", "png | pgm");
  add_value_flag(gen_cmd, pending, "--reference-latents", "reference_latents",
                 "latent CSV fitted when source=vmf");

  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint, append to metrics CSV");
  add_common_flags(eval_cmd, pending);
  add_value_flag(eval_cmd, pending, "--checkpoint", "checkpoint", "checkpoint to score");
  add_value_flag(eval_cmd, pending, "--mode", "mode", "picks the default checkpoint name");
  add_value_flag(eval_cmd, pending, "--latent-dim", "latent_dim",
                 "picks the default checkpoint name");
  add_value_flag(eval_cmd, pending, "--beta-max", "beta_max", "beta column of emitted rows");
  add_value_flag(eval_cmd, pending, "--metrics", "metrics",
                 "comma list of mse,knn,self_fid,concentration");
  add_value_flag(eval_cmd, pending, "--eval-split", "eval_split", "test | train");
  add_value_flag(eval_cmd, pending, "--knn-k", "knn_k", "odd neighbor count");
  add_value_flag(eval_cmd, pending, "--fid-count", "fid_count", "self-FID sample count");
  add_value_flag(eval_cmd, pending, "--proxy-weights", "proxy_weights", "extractor weights");
  add_value_flag(eval_cmd, pending, "--reference-latents", "reference_latents",
                 "latent CSV fitted for vmf sampling");
  add_value_flag(eval_cmd, pending, "--train-count", "train_count", "first K training rows");
  add_value_flag(eval_cmd, pending, "--test-count", "test_count", "first K test rows");

  CLI::App* project_cmd =
      app.add_subcommand("project", "embed the test set, write 3-sphere projection + latent CSVs");
  add_common_flags(project_cmd, pending);
  add_value_flag(project_cmd, pending, "--checkpoint", "checkpoint", "checkpoint to embed with");
  add_value_flag(project_cmd, pending, "--mode", "mode", "picks the default checkpoint name");
  add_value_flag(project_cmd, pending, "--latent-dim", "latent_dim",
                 "picks the default checkpoint name");
  add_value_flag(project_cmd, pending, "--groups", "groups", "three comma ints summing to n");
  add_value_flag(project_cmd, pending, "--test-count", "test_count", "first K test rows");

  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "train + score a (mode, beta, n) grid into sweep.csv");
  add_common_flags(sweep_cmd, pending);
  add_value_flag(sweep_cmd, pending, "--beta-list", "beta_list", "comma list of beta_max values");
  add_value_flag(sweep_cmd, pending, "--n-list", "n_list", "comma list of latent dimensions");
  add_value_flag(sweep_cmd, pending, "--epochs", "epochs", "epochs per cell");
  add_value_flag(sweep_cmd, pending, "--train-count", "train_count", "first K training rows");
  add_value_flag(sweep_cmd, pending, "--test-count", "test_count", "first K test rows");
  add_value_flag(sweep_cmd, pending, "--fid-count", "fid_count", "self-FID sample count");
  add_value_flag(sweep_cmd, pending, "--proxy-weights", "proxy_weights", "extractor weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg;
    if (!pending.config_path.empty()) apply_config_file(cfg, pending.config_path);
    for (const auto& [key, value] : pending.overrides)
      apply_key(cfg, key, value, "flag --" + key);

    if (app.got_subcommand(train_cmd)) return cmd_train(cfg);
    if (app.got_subcommand(proxy_cmd)) return cmd_train_proxy(cfg);
    if (app.got_subcommand(gen_cmd)) return cmd_generate(cfg);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(cfg);
    if (app.got_subcommand(project_cmd)) return cmd_project(cfg);
    if (app.got_subcommand(sweep_cmd)) return cmd_sweep(cfg);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
