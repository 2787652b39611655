#pragma once

// Dense layer building block with He initialization, plus the finite-ness
// guard every forward activation passes through.

#include <cmath>
#include <string>

#include "hsvae/common.hpp"
#include "hsvae/rng.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

inline void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError(detail::str(where, " produced a non-finite activation"));
}

struct Linear {
  Tensor W;  // {in, out}; y = x W + b
  Tensor b;  // {1, out}

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng, const std::string& name) {
    W = Tensor::randn(in, out, rng, true);
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& v : W.mutable_data()) v *= scale;
    W.set_name(name + ".W");
    b = Tensor::zeros(1, out, true);
    b.set_name(name + ".b");
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, W), b); }
};

}  // namespace hsvae
