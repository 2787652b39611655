#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

// Adam with the usual bias correction. A parameter whose grad buffer was
// never populated (unreachable from the loss) is treated as having zero
// gradient; with zero moments that leaves it bitwise unchanged.
class AdamOptimizer {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit AdamOptimizer(std::vector<Tensor> params)
      : AdamOptimizer(std::move(params), Config{}) {}

  AdamOptimizer(std::vector<Tensor> params, Config cfg)
      : params_(std::move(params)), cfg_(cfg) {
    state_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      state_[i].m.assign(params_[i].data().size(), 0.0);
      state_[i].v.assign(params_[i].data().size(), 0.0);
    }
  }

  const std::vector<Tensor>& params() const { return params_; }
  int64_t steps() const { return t_; }

  void step() {
    // Validate every gradient before touching any parameter, so a refused
    // step leaves the whole model untouched.
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (double g : p.grad())
        if (!std::isfinite(g))
          throw NumericError(detail::str("optimizer_step: non-finite gradient in parameter '",
                                         p.name().empty() ? "<unnamed>" : p.name(), "'"));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto& st = state_[i];
      auto w = p.mutable_data();
      const bool has = p.has_grad();
      for (size_t j = 0; j < w.size(); ++j) {
        const double g = has ? p.grad()[j] : 0.0;
        st.m[j] = cfg_.beta1 * st.m[j] + (1.0 - cfg_.beta1) * g;
        st.v[j] = cfg_.beta2 * st.v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[j] / bc1;
        const double vhat = st.v[j] / bc2;
        w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };

  std::vector<Tensor> params_;
  std::vector<State> state_;
  int64_t t_ = 0;
  Config cfg_;
};

}  // namespace hsvae
