#pragma once

// Conversions between Cartesian and hyperspherical coordinates. Two paths:
// an exact per-row transform with a singularity guard (diagnostics, exact
// inverse), and an eps-stabilized batched transform built from differentiable
// tensor ops (the training path). Cosines are the canonical representation;
// angles only ever appear in diagnostics.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

// r is batch x 1, cosines batch x (n-1) with column k holding cos(phi_{k+1}).
// Angles phi_1..phi_{n-2} live in [0, pi]; phi_{n-1} in [0, 2pi), so its sine
// can be negative. neg_last[i] records sign(sin phi_{n-1}) = sign(x_n) for
// row i, which makes the inverse exact.
struct HsphCoords {
  Tensor r;
  Tensor cosines;
  std::vector<std::uint8_t> neg_last;
};

inline constexpr double kSuffixGuard = 1e-6;

// Exact transform; suffix norms below the guard (poles/center) are rejected
// with the offending row and 1-based coordinate index.
inline HsphCoords cart_to_hsph_exact(const Tensor& x) {
  const int64_t batch = x.rows(), n = x.cols();
  if (n < 2) throw ValueError(detail::str("cart_to_hsph_exact: need n >= 2, got n=", n));
  HsphCoords out;
  out.r = Tensor::zeros(batch, 1);
  out.cosines = Tensor::zeros(batch, n - 1);
  out.neg_last.assign(static_cast<size_t>(batch), 0);
  auto rdat = out.r.mutable_data();
  auto cdat = out.cosines.mutable_data();
  std::vector<double> suffix(static_cast<size_t>(n));
  for (int64_t i = 0; i < batch; ++i) {
    double acc = 0.0;
    for (int64_t j = n - 1; j >= 0; --j) {
      const double v = x.at(i, j);
      acc += v * v;
      suffix[static_cast<size_t>(j)] = acc;
    }
    for (int64_t k = 0; k < n - 1; ++k) {
      const double norm = std::sqrt(suffix[static_cast<size_t>(k)]);
      if (!(norm > kSuffixGuard))
        throw ValueError(detail::str("cart_to_hsph_exact: suffix norm ", norm, " at row ", i,
                                     ", coordinate ", k + 1, " is below the ", kSuffixGuard,
                                     " singularity guard"));
      cdat[static_cast<size_t>(i * (n - 1) + k)] = x.at(i, k) / norm;
    }
    rdat[static_cast<size_t>(i)] = std::sqrt(suffix[0]);
    out.neg_last[static_cast<size_t>(i)] = x.at(i, n - 1) < 0.0 ? 1 : 0;
  }
  return out;
}

// Inverse transform (Eq. 10 pattern): x_k = r * prod_{j<k} sin(phi_j) *
// cos(phi_k), last coordinate picks up the full sine product with the stored
// sign. Cosines slightly past +-1 (within 1e-12) are clamped; worse is an
// error.
inline Tensor hsph_to_cart(const HsphCoords& c) {
  const int64_t batch = c.cosines.rows(), n = c.cosines.cols() + 1;
  if (c.r.rows() != batch || c.r.cols() != 1)
    throw ValueError(detail::str("hsph_to_cart: r must be ", batch, "x1, got ", c.r.rows(), "x",
                                 c.r.cols()));
  if (c.neg_last.size() != static_cast<size_t>(batch))
    throw ValueError("hsph_to_cart: sign-bit vector does not match batch size");
  Tensor out = Tensor::zeros(batch, n);
  auto od = out.mutable_data();
  for (int64_t i = 0; i < batch; ++i) {
    const double r = c.r.at(i, 0);
    if (!(r > 0.0)) throw ValueError(detail::str("hsph_to_cart: r must be positive, got ", r,
                                                 " at row ", i));
    double prod = r;
    for (int64_t k = 0; k < n - 1; ++k) {
      double cosv = c.cosines.at(i, k);
      if (std::abs(cosv) > 1.0 + 1e-12)
        throw ValueError(detail::str("hsph_to_cart: cosine ", cosv, " at row ", i, ", angle ",
                                     k + 1, " outside [-1, 1]"));
      cosv = std::min(1.0, std::max(-1.0, cosv));
      od[static_cast<size_t>(i * n + k)] = prod * cosv;
      prod *= std::sqrt(1.0 - cosv * cosv);
    }
    od[static_cast<size_t>(i * n + n - 1)] = c.neg_last[static_cast<size_t>(i)] ? -prod : prod;
  }
  return out;
}

// Stabilized batched cosine transform: column k of the result is
// x_k / sqrt(sum_{j>=k} x_j^2 + eps). Differentiable, and safe on zero rows
// for eps > 0. The suffix sums come from a reverse cumulative sum whose
// addition order (descending columns) is the contract the test oracle pins.
inline Tensor cart_to_cos_batched(const Tensor& x, double eps = 0.001) {
  const int64_t n = x.cols();
  if (n < 2) throw ValueError(detail::str("cart_to_cos_batched: need n >= 2, got n=", n));
  if (!(eps >= 0.0)) throw ValueError(detail::str("cart_to_cos_batched: eps must be >= 0, got ", eps));
  Tensor denom = sqrt_(add(suffix_cumsum(square(x)), eps));
  return slice_cols(divide(x, denom), 0, n - 1);
}

// Rescales every row to the target norm, preserving direction. Differentiable.
inline Tensor normalize_to_radius(const Tensor& z, double target) {
  if (!(target > 0.0))
    throw ValueError(detail::str("normalize_to_radius: target must be positive, got ", target));
  Tensor norms = sqrt_(sum(square(z), 1));
  {
    NoGradGuard ng;
    const auto& nd = norms.data();
    for (int64_t i = 0; i < norms.rows(); ++i)
      if (!(nd[static_cast<size_t>(i)] > 1e-12))
        throw ValueError(detail::str("normalize_to_radius: row ", i, " has norm ",
                                     nd[static_cast<size_t>(i)],
                                     "; direction undefined below 1e-12"));
  }
  return mul(z, divide(Tensor::scalar(target), norms));
}

// Log of the hypervolume density factor R^{n-1} * prod_{k=1}^{n-2}
// sin^{n-1-k}(phi_k). The last angle carries exponent zero and drops out.
// Poles give -inf, which is a legal return value here, not an error.
inline double log_volume_element(double R, const Tensor& cosines) {
  if (!(R > 0.0))
    throw ValueError(detail::str("log_volume_element: R must be positive, got ", R));
  if (cosines.rows() != 1)
    throw ValueError(detail::str("log_volume_element: expected a single row of cosines, got ",
                                 cosines.rows(), "x", cosines.cols()));
  const int64_t n = cosines.cols() + 1;
  double total = static_cast<double>(n - 1) * std::log(R);
  for (int64_t k = 0; k < n - 2; ++k) {
    const double c = cosines.at(0, k);
    if (std::abs(c) > 1.0)
      throw ValueError(detail::str("log_volume_element: cosine ", c, " at angle ", k + 1,
                                   " outside [-1, 1]"));
    const double sin2 = 1.0 - c * c;
    if (sin2 <= 0.0) return -std::numeric_limits<double>::infinity();
    total += static_cast<double>(n - 2 - k) * 0.5 * std::log(sin2);
  }
  return total;
}

}  // namespace hsvae
