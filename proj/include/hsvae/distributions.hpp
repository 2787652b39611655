#pragma once

// Samplers and estimators: standard Gaussian batches, von Mises-Fisher
// sampling/fitting, and a concentration-of-measure report for diagnosing
// high-dimensional latent geometry.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/hypersphere.hpp"
#include "hsvae/rng.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

struct VmfParams {
  Tensor mean_direction;  // 1 x n, unit norm
  double kappa = 0.0;
  bool kappa_capped = false;  // set by fit_vmf when r-bar ~ 1 forced the cap
};

inline constexpr double kKappaCap = 1e6;

// Mean of the chi(n) distribution: sqrt(2) * Gamma((n+1)/2) / Gamma(n/2),
// evaluated through lgamma so large n stays finite.
inline double chi_mean(int64_t n) {
  return std::exp(0.5 * std::log(2.0) + std::lgamma((static_cast<double>(n) + 1.0) / 2.0) -
                  std::lgamma(static_cast<double>(n) / 2.0));
}

inline double chi_std(int64_t n) {
  const double m = chi_mean(n);
  return std::sqrt(static_cast<double>(n) - m * m);
}

inline Tensor sample_gaussian(int64_t count, int64_t n, uint64_t seed) {
  if (count < 1 || n < 1)
    throw ValueError(detail::str("sample_gaussian: need count, n >= 1, got ", count, ", ", n));
  Rng rng(seed);
  return Tensor::randn(count, n, rng);
}

namespace detail {

// One uniform draw on the unit sphere S^{dim-1}; resamples the (measure-zero)
// degenerate Gaussian rows.
inline void uniform_direction(Rng& rng, double* out, int64_t dim) {
  for (;;) {
    double nrm = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
      out[j] = rng.normal();
      nrm += out[j] * out[j];
    }
    nrm = std::sqrt(nrm);
    if (nrm > 1e-12) {
      for (int64_t j = 0; j < dim; ++j) out[j] /= nrm;
      return;
    }
  }
}

}  // namespace detail

// Wood's rejection sampler: radial component W along the mean direction from
// a Beta envelope, tangent component uniform on S^{n-2}, then a Householder
// reflection carries the north pole onto mean_direction.
inline Tensor sample_vmf(const VmfParams& p, int64_t count, uint64_t seed) {
  const int64_t n = p.mean_direction.cols();
  if (p.mean_direction.rows() != 1 || n < 2)
    throw ValueError(detail::str("sample_vmf: mean_direction must be 1 x n with n >= 2, got ",
                                 p.mean_direction.rows(), "x", n));
  if (!(p.kappa >= 0.0))
    throw ValueError(detail::str("sample_vmf: kappa must be >= 0, got ", p.kappa));
  double munorm = 0.0;
  for (int64_t j = 0; j < n; ++j) munorm += p.mean_direction.at(0, j) * p.mean_direction.at(0, j);
  munorm = std::sqrt(munorm);
  if (std::abs(munorm - 1.0) > 1e-9)
    throw ValueError(detail::str("sample_vmf: mean_direction norm ", munorm, " is not 1 +- 1e-9"));

  Rng rng(seed);
  Tensor out = Tensor::zeros(count, n);
  auto od = out.mutable_data();

  // Householder vector u st (I - 2uu^T) e1 = mu; identity when mu ~ e1.
  std::vector<double> house(static_cast<size_t>(n), 0.0);
  bool reflect = false;
  {
    double un = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      house[static_cast<size_t>(j)] = (j == 0 ? 1.0 : 0.0) - p.mean_direction.at(0, j);
      un += house[static_cast<size_t>(j)] * house[static_cast<size_t>(j)];
    }
    un = std::sqrt(un);
    if (un > 1e-12) {
      reflect = true;
      for (auto& v : house) v /= un;
    }
  }

  const double dim = static_cast<double>(n);
  // rationalized form of (-2k + sqrt(4k^2 + (n-1)^2))/(n-1): no cancellation
  const double b = p.kappa > 0.0
                       ? (dim - 1.0) /
                             (2.0 * p.kappa + std::sqrt(4.0 * p.kappa * p.kappa + (dim - 1.0) * (dim - 1.0)))
                       : 1.0;
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = p.kappa * x0 + (dim - 1.0) * std::log(1.0 - x0 * x0);

  std::vector<double> tangent(static_cast<size_t>(n - 1));
  std::vector<double> row(static_cast<size_t>(n));
  for (int64_t i = 0; i < count; ++i) {
    double w;
    if (p.kappa == 0.0) {
      detail::uniform_direction(rng, row.data(), n);
    } else {
      int tries = 0;
      for (;;) {
        if (++tries > 100000)
          throw NumericError("sample_vmf: rejection sampler failed to accept after 100000 tries");
        const double z = rng.beta((dim - 1.0) / 2.0, (dim - 1.0) / 2.0);
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        const double u = rng.uniform_pos();
        if (p.kappa * w + (dim - 1.0) * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
      }
      detail::uniform_direction(rng, tangent.data(), n - 1);
      const double s = std::sqrt(std::max(0.0, 1.0 - w * w));
      row[0] = w;
      for (int64_t j = 1; j < n; ++j) row[static_cast<size_t>(j)] = s * tangent[static_cast<size_t>(j - 1)];
    }
    if (reflect && p.kappa > 0.0) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += house[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
      for (int64_t j = 0; j < n; ++j) row[static_cast<size_t>(j)] -= 2.0 * dot * house[static_cast<size_t>(j)];
    }
    double nrm = 0.0;
    for (int64_t j = 0; j < n; ++j) nrm += row[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
    nrm = std::sqrt(nrm);
    for (int64_t j = 0; j < n; ++j) od[static_cast<size_t>(i * n + j)] = row[static_cast<size_t>(j)] / nrm;
  }
  return out;
}

// Banerjee et al. closed-form estimator: kappa-hat = rbar(n - rbar^2)/(1 - rbar^2)
// where rbar is the resultant length of the unit-normalized rows.
inline VmfParams fit_vmf(const Tensor& latents) {
  const int64_t m = latents.rows(), n = latents.cols();
  if (m < 2) throw ValueError(detail::str("fit_vmf: need at least 2 rows, got ", m));
  std::vector<double> mean(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    double nrm = 0.0;
    for (int64_t j = 0; j < n; ++j) nrm += latents.at(i, j) * latents.at(i, j);
    nrm = std::sqrt(nrm);
    if (!(nrm > 1e-12))
      throw ValueError(detail::str("fit_vmf: row ", i, " has norm ", nrm, "; cannot normalize"));
    for (int64_t j = 0; j < n; ++j) mean[static_cast<size_t>(j)] += latents.at(i, j) / nrm;
  }
  double rbar = 0.0;
  for (auto& v : mean) {
    v /= static_cast<double>(m);
    rbar += v * v;
  }
  rbar = std::sqrt(rbar);
  if (rbar < 1e-9)
    throw ValueError(detail::str("fit_vmf: resultant length ", rbar,
                                 " ~ 0; no preferred direction to fit"));
  VmfParams out;
  out.mean_direction = Tensor::zeros(1, n);
  auto md = out.mean_direction.mutable_data();
  for (int64_t j = 0; j < n; ++j) md[static_cast<size_t>(j)] = mean[static_cast<size_t>(j)] / rbar;
  const double denom = 1.0 - rbar * rbar;
  double kappa = denom > 0.0 ? rbar * (static_cast<double>(n) - rbar * rbar) / denom
                             : std::numeric_limits<double>::infinity();
  if (!(kappa <= kKappaCap)) {
    kappa = kKappaCap;
    out.kappa_capped = true;
  }
  out.kappa = kappa;
  return out;
}

// Summary statistics backing the concentration-of-measure story: norms vs the
// chi(n) law, per-angle cosine batch statistics, and a deterministic
// pairwise-cosine probe (pairs (i, i + m/2), no RNG involved).
struct ConcentrationReport {
  int64_t m = 0, n = 0;
  double norm_mean = 0.0, norm_std = 0.0;
  double chi_mean_theory = 0.0, chi_std_theory = 0.0;
  std::vector<double> cos_mean, cos_std;  // per angle, length n-1
  double pair_cos_mean = 0.0, pair_cos_std = 0.0, pair_abs_cos_max = 0.0;
  int64_t pair_count = 0;

  // columns: statistic, empirical, theoretical, z-score
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "statistic,empirical,theoretical,z_score\n";
    const double md = static_cast<double>(m);
    os << "norm_mean," << norm_mean << "," << chi_mean_theory << ","
       << (norm_mean - chi_mean_theory) / (norm_std > 0 ? norm_std / std::sqrt(md) : 1.0) << "\n";
    os << "norm_std," << norm_std << "," << chi_std_theory << ","
       << (norm_std - chi_std_theory) / (chi_std_theory > 0 ? chi_std_theory / std::sqrt(2.0 * md) : 1.0)
       << "\n";
    const double shell_t = chi_std_theory / chi_mean_theory;
    const double shell_e = norm_mean > 0 ? norm_std / norm_mean : 0.0;
    os << "shell_thickness," << shell_e << "," << shell_t << ","
       << (shell_e - shell_t) / (shell_t > 0 ? shell_t / std::sqrt(2.0 * md) : 1.0) << "\n";
    double worst = 0.0, worst_z = 0.0;
    for (size_t k = 0; k + 1 < cos_mean.size(); ++k) {  // k <= n-2 only
      const double z = cos_std[k] > 0 ? std::abs(cos_mean[k]) / (cos_std[k] / std::sqrt(md)) : 0.0;
      if (std::abs(cos_mean[k]) > worst) worst = std::abs(cos_mean[k]);
      if (z > worst_z) worst_z = z;
    }
    os << "angle_cos_mean_maxabs," << worst << ",0," << worst_z << "\n";
    os << "pair_cos_mean," << pair_cos_mean << ",0,"
       << (pair_cos_std > 0 ? pair_cos_mean / (pair_cos_std / std::sqrt(static_cast<double>(pair_count))) : 0.0)
       << "\n";
    const double bound = 3.0 / std::sqrt(static_cast<double>(n));
    os << "pair_abs_cos_max," << pair_abs_cos_max << "," << bound << ","
       << pair_abs_cos_max / bound << "\n";
    return os.str();
  }
};

inline ConcentrationReport concentration_report(const Tensor& samples) {
  const int64_t m = samples.rows(), n = samples.cols();
  if (m < 100) throw ValueError(detail::str("concentration_report: need >= 100 rows, got ", m));
  ConcentrationReport rep;
  rep.m = m;
  rep.n = n;
  rep.chi_mean_theory = chi_mean(n);
  rep.chi_std_theory = chi_std(n);

  std::vector<double> norms(static_cast<size_t>(m));
  double acc = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += samples.at(i, j) * samples.at(i, j);
    norms[static_cast<size_t>(i)] = std::sqrt(s);
    acc += norms[static_cast<size_t>(i)];
  }
  rep.norm_mean = acc / static_cast<double>(m);
  acc = 0.0;
  for (double v : norms) acc += (v - rep.norm_mean) * (v - rep.norm_mean);
  rep.norm_std = std::sqrt(acc / static_cast<double>(m));

  if (n >= 2) {
    NoGradGuard ng;
    Tensor cosines = cart_to_cos_batched(samples, 0.001);
    rep.cos_mean.assign(static_cast<size_t>(n - 1), 0.0);
    rep.cos_std.assign(static_cast<size_t>(n - 1), 0.0);
    for (int64_t k = 0; k < n - 1; ++k) {
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += cosines.at(i, k);
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double d = cosines.at(i, k) - mu;
        var += d * d;
      }
      rep.cos_mean[static_cast<size_t>(k)] = mu;
      rep.cos_std[static_cast<size_t>(k)] = std::sqrt(var / static_cast<double>(m));
    }
  }

  rep.pair_count = std::min<int64_t>(1000, m / 2);
  double pm = 0.0, pv = 0.0, pmax = 0.0;
  std::vector<double> vals(static_cast<size_t>(rep.pair_count));
  for (int64_t i = 0; i < rep.pair_count; ++i) {
    const int64_t a = i, bidx = i + m / 2;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      dot += samples.at(a, j) * samples.at(bidx, j);
      na += samples.at(a, j) * samples.at(a, j);
      nb += samples.at(bidx, j) * samples.at(bidx, j);
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    const double cosv = denom > 0 ? dot / denom : 0.0;
    vals[static_cast<size_t>(i)] = cosv;
    pm += cosv;
    pmax = std::max(pmax, std::abs(cosv));
  }
  pm /= static_cast<double>(rep.pair_count);
  for (double v : vals) pv += (v - pm) * (v - pm);
  rep.pair_cos_mean = pm;
  rep.pair_cos_std = std::sqrt(pv / static_cast<double>(rep.pair_count));
  rep.pair_abs_cos_max = pmax;
  return rep;
}

}  // namespace hsvae
