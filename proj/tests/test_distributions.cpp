#include <gtest/gtest.h>

#include <cmath>

#include "hsvae/distributions.hpp"

using namespace hsvae;

namespace {

TEST(Gaussian, SeedDeterminism) {
  Tensor a = sample_gaussian(8, 5, 77);
  Tensor b = sample_gaussian(8, 5, 77);
  for (size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  Tensor c = sample_gaussian(8, 5, 78);
  EXPECT_NE(a.at(0, 0), c.at(0, 0));
}

TEST(Gaussian, NormsFollowChiLaw) {
  // mean norm within 3 standard errors of sqrt(2)*Gamma((n+1)/2)/Gamma(n/2)
  for (int64_t n : {8, 32, 128, 512}) {
    const int64_t count = 10000;
    Tensor x = sample_gaussian(count, n, 1000 + static_cast<uint64_t>(n));
    double mean = 0.0;
    std::vector<double> norms(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += x.at(i, j) * x.at(i, j);
      norms[static_cast<size_t>(i)] = std::sqrt(s);
      mean += norms[static_cast<size_t>(i)];
    }
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (double v : norms) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / static_cast<double>(count)) / std::sqrt(static_cast<double>(count));
    EXPECT_LE(std::abs(mean - chi_mean(n)), 3.0 * se) << "n=" << n;
    if (n == 128) EXPECT_LE(std::abs(mean - chi_mean(n)) / chi_mean(n), 0.01);
  }
}

TEST(Gaussian, AlmostOrthogonalPairs) {
  const int64_t n = 128, count = 10000;
  Tensor x = sample_gaussian(count, n, 4242);
  Rng pair_rng(99);
  double acc = 0.0;
  const int pairs = 1000;
  for (int t = 0; t < pairs; ++t) {
    int64_t i = pair_rng.uniform_int(0, count - 1);
    int64_t j = pair_rng.uniform_int(0, count - 1);
    if (i == j) j = (j + 1) % count;
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      dot += x.at(i, k) * x.at(j, k);
      ni += x.at(i, k) * x.at(i, k);
      nj += x.at(j, k) * x.at(j, k);
    }
    acc += std::abs(dot / (std::sqrt(ni) * std::sqrt(nj)));
  }
  EXPECT_LT(acc / pairs, 3.0 / std::sqrt(128.0));
}

TEST(Vmf, UniformLimitAtKappaZero) {
  VmfParams p;
  p.mean_direction = Tensor::from_data(1, 3, {0, 0, 1});
  p.kappa = 0.0;
  Tensor s = sample_vmf(p, 10000, 7);
  double mx = 0, my = 0, mz = 0;
  for (int64_t i = 0; i < 10000; ++i) {
    mx += s.at(i, 0);
    my += s.at(i, 1);
    mz += s.at(i, 2);
  }
  mx /= 10000;
  my /= 10000;
  mz /= 10000;
  EXPECT_LT(std::sqrt(mx * mx + my * my + mz * mz), 0.05);
}

TEST(Vmf, HighKappaConcentrates) {
  // typical angular deviation is sqrt((n-1)/kappa), so the 0.1-rad envelope
  // needs kappa to grow with n; 1e4 covers n up to ~32 comfortably.
  for (auto [n, kappa] : {std::pair<int64_t, double>{2, 1e4}, {8, 1e4}, {32, 1e4}, {64, 1e5}}) {
    VmfParams p;
    p.mean_direction = Tensor::zeros(1, n);
    {
      // an arbitrary non-axis unit direction
      auto md = p.mean_direction.mutable_data();
      for (int64_t j = 0; j < n; ++j) md[static_cast<size_t>(j)] = 1.0 / std::sqrt(static_cast<double>(n));
    }
    p.kappa = kappa;
    Tensor s = sample_vmf(p, 500, 11);
    for (int64_t i = 0; i < 500; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += s.at(i, j) * p.mean_direction.at(0, j);
      EXPECT_LT(std::acos(std::min(1.0, dot)), 0.1) << "n=" << n;
    }
  }
}

TEST(Vmf, UnitNormsAndDeterminism) {
  VmfParams p;
  p.mean_direction = Tensor::from_data(1, 4, {0.5, 0.5, 0.5, 0.5});
  p.kappa = 3.0;
  Tensor a = sample_vmf(p, 300, 5);
  Tensor b = sample_vmf(p, 300, 5);
  for (int64_t i = 0; i < 300; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 4; ++j) s += a.at(i, j) * a.at(i, j);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
  }
  for (size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Vmf, RejectsBadMeanDirection) {
  VmfParams p;
  p.mean_direction = Tensor::from_data(1, 3, {1, 1, 0});  // norm sqrt(2)
  p.kappa = 1.0;
  EXPECT_THROW(sample_vmf(p, 10, 1), ValueError);
}

TEST(VmfFit, DegenerateIdenticalRows) {
  Tensor rows = Tensor::zeros(5, 4);
  auto rd = rows.mutable_data();
  for (int64_t i = 0; i < 5; ++i) rd[static_cast<size_t>(i * 4 + 2)] = 1.0;
  VmfParams f = fit_vmf(rows);
  EXPECT_NEAR(f.mean_direction.at(0, 2), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(f.kappa, kKappaCap);
  EXPECT_TRUE(f.kappa_capped);
}

TEST(VmfFit, AntipodalPairRejected) {
  Tensor rows = Tensor::from_data(2, 3, {1, 0, 0, -1, 0, 0});
  EXPECT_THROW(fit_vmf(rows), ValueError);
}

TEST(VmfFit, RoundTripRecoverParameters) {
  VmfParams p;
  p.mean_direction = Tensor::zeros(1, 16);
  p.mean_direction.mutable_data()[0] = 0.6;
  p.mean_direction.mutable_data()[5] = 0.8;
  p.kappa = 50.0;
  VmfParams f = fit_vmf(sample_vmf(p, 10000, 33));
  EXPECT_GE(f.kappa, 40.0);
  EXPECT_LE(f.kappa, 60.0);
  double dot = 0.0;
  for (int64_t j = 0; j < 16; ++j) dot += f.mean_direction.at(0, j) * p.mean_direction.at(0, j);
  EXPECT_LT(std::acos(std::min(1.0, dot)), 0.05);
}

TEST(VmfFit, ConsistencyAcrossKappaAndDim) {
  uint64_t seed = 100;
  const int64_t m = 10000;
  for (double kappa : {5.0, 50.0, 500.0}) {
    for (int64_t n : {8, 64, 128}) {
      VmfParams p;
      p.mean_direction = Tensor::zeros(1, n);
      p.mean_direction.mutable_data()[static_cast<size_t>(n - 1)] = 1.0;
      p.kappa = kappa;
      Tensor s = sample_vmf(p, m, seed++);
      VmfParams f = fit_vmf(s);
      EXPECT_LE(std::abs(f.kappa - kappa) / kappa, 0.25) << "kappa=" << kappa << " n=" << n;
      // direction error floor: resultant length rbar sets the angular SE
      // ~ sqrt((n-1)/(n m))/rbar, so weakly concentrated high-n cells cannot
      // beat 0.05 rad with m=1e4 no matter how good the sampler is.
      double rbar = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double cj = 0.0;
        for (int64_t i = 0; i < m; ++i) cj += s.at(i, j);
        cj /= static_cast<double>(m);
        rbar += cj * cj;
      }
      rbar = std::sqrt(rbar);
      const double se = std::sqrt(static_cast<double>(n - 1) / static_cast<double>(n * m)) / rbar;
      const double tol = std::max(0.05, 4.0 * se);
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += f.mean_direction.at(0, j) * p.mean_direction.at(0, j);
      EXPECT_LT(std::acos(std::min(1.0, dot)), tol) << "kappa=" << kappa << " n=" << n;
    }
  }
}

TEST(Report, GaussianShellStatistics) {
  Tensor x = sample_gaussian(10000, 128, 2024);
  ConcentrationReport rep = concentration_report(x);
  EXPECT_NEAR(rep.norm_std, rep.chi_std_theory, 0.05);
  EXPECT_NEAR(rep.chi_std_theory, 1.0 / std::sqrt(2.0), 0.01);  // large-n limit
  EXPECT_LT(rep.norm_std / rep.norm_mean, 0.07);
  std::string csv = rep.to_csv();
  EXPECT_NE(csv.find("statistic,empirical,theoretical,z_score"), std::string::npos);
  EXPECT_NE(csv.find("norm_mean,"), std::string::npos);
  EXPECT_NE(csv.find("pair_abs_cos_max,"), std::string::npos);
}

TEST(Report, AllEqualRowsHaveZeroStd) {
  Tensor x = Tensor::full(100, 8, 0.5);
  ConcentrationReport rep = concentration_report(x);
  EXPECT_NEAR(rep.norm_std, 0.0, 1e-12);
}

TEST(Report, UniformSphereAnglesCenterOnEquator) {
  VmfParams p;
  p.mean_direction = Tensor::zeros(1, 32);
  p.mean_direction.mutable_data()[0] = 1.0;
  p.kappa = 0.0;
  Tensor s = sample_vmf(p, 10000, 55);
  ConcentrationReport rep = concentration_report(s);
  for (size_t k = 0; k + 1 < rep.cos_mean.size(); ++k) {
    const double se = rep.cos_std[k] / std::sqrt(10000.0);
    EXPECT_LE(std::abs(rep.cos_mean[k]), 3.0 * se) << "angle " << k + 1;
  }
  EXPECT_THROW(concentration_report(Tensor::zeros(50, 8)), ValueError);
}

}  // namespace
