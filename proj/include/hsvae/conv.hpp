#pragma once

// Minimal 2-D convolution support for the proxy feature extractor: valid
// (unpadded) strided convolution expressed as im2col + matmul, plus the
// layout retile between conv layers and a fused softmax cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hsvae/common.hpp"
#include "hsvae/tensor.hpp"

namespace hsvae {

// Geometry of one valid conv layer over row-major images flattened as
// channel-major rows (index = c*H*W + y*W + x). The table maps each
// (patch position, patch column) pair to its source offset in one image.
struct Conv2dGeom {
  int64_t in_ch = 0, height = 0, width = 0, kernel = 0, stride = 0;
  int64_t out_h = 0, out_w = 0;
  std::vector<int64_t> table;  // out_h*out_w rows of in_ch*kernel*kernel offsets

  Conv2dGeom(int64_t in_ch_, int64_t height_, int64_t width_, int64_t kernel_, int64_t stride_)
      : in_ch(in_ch_), height(height_), width(width_), kernel(kernel_), stride(stride_) {
    if (in_ch < 1 || height < 1 || width < 1 || kernel < 1 || stride < 1)
      throw ValueError("Conv2dGeom: all extents must be >= 1");
    if (kernel > height || kernel > width)
      throw ValueError(detail::str("Conv2dGeom: kernel ", kernel, " exceeds image ", height, "x", width));
    out_h = (height - kernel) / stride + 1;
    out_w = (width - kernel) / stride + 1;
    table.reserve(static_cast<size_t>(positions() * patch_len()));
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox)
        for (int64_t c = 0; c < in_ch; ++c)
          for (int64_t ky = 0; ky < kernel; ++ky)
            for (int64_t kx = 0; kx < kernel; ++kx)
              table.push_back(c * height * width + (oy * stride + ky) * width +
                              (ox * stride + kx));
  }

  int64_t positions() const { return out_h * out_w; }
  int64_t patch_len() const { return in_ch * kernel * kernel; }
  int64_t in_len() const { return in_ch * height * width; }
};

// x[m x in_len] -> patches[(m*positions) x patch_len]; backward scatter-adds
// through the shared index table in a fixed order.
inline Tensor im2col(const Tensor& x, const Conv2dGeom& g) {
  if (x.cols() != g.in_len())
    throw ValueError(detail::str("im2col: row length ", x.cols(), " does not match geometry ",
                                 g.in_len()));
  const int64_t m = x.rows(), pos = g.positions(), pl = g.patch_len();
  auto xp = x.ptr();
  // the table is copied into the closure so the graph never outlives it
  Tensor out = detail::make_result(m * pos, pl, {xp},
                                   [xp, m, pos, pl, tbl = g.table](TensorNode& self) {
    if (!xp->requires_grad) return;
    const int64_t in_len = xp->cols;
    for (int64_t i = 0; i < m; ++i) {
      double* gx = xp->grad.data() + i * in_len;
      const double* go = self.grad.data() + i * pos * pl;
      for (int64_t e = 0; e < pos * pl; ++e) gx[tbl[static_cast<size_t>(e)]] += go[e];
    }
  });
  auto& od = out.node().data;
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = xp->data.data() + i * g.in_len();
    double* oi = od.data() + i * pos * pl;
    for (int64_t e = 0; e < pos * pl; ++e) oi[e] = xi[g.table[static_cast<size_t>(e)]];
  }
  return out;
}

// y[(m*pos) x oc] -> out[m x (oc*pos)]: channel-major retile so a conv output
// can feed the next layer's im2col. Pure permutation within each image block.
inline Tensor block_retile(const Tensor& y, int64_t m) {
  if (m < 1 || y.rows() % m != 0)
    throw ValueError(detail::str("block_retile: ", y.rows(), " rows do not split into ", m, " blocks"));
  const int64_t pos = y.rows() / m, oc = y.cols();
  auto yp = y.ptr();
  Tensor out = detail::make_result(m, oc * pos, {yp}, [yp, m, pos, oc](TensorNode& self) {
    if (!yp->requires_grad) return;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t c = 0; c < oc; ++c)
        for (int64_t p = 0; p < pos; ++p)
          yp->grad[static_cast<size_t>((i * pos + p) * oc + c)] +=
              self.grad[static_cast<size_t>(i * oc * pos + c * pos + p)];
  });
  auto& od = out.node().data;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t c = 0; c < oc; ++c)
      for (int64_t p = 0; p < pos; ++p)
        od[static_cast<size_t>(i * oc * pos + c * pos + p)] =
            yp->data[static_cast<size_t>((i * pos + p) * oc + c)];
  return out;
}

// Valid strided conv: weights[patch_len x out_ch], bias[1 x out_ch];
// returns m x (out_ch * positions) in channel-major layout.
inline Tensor conv2d(const Tensor& x, const Tensor& weights, const Tensor& bias,
                     const Conv2dGeom& g) {
  if (weights.rows() != g.patch_len())
    throw ValueError(detail::str("conv2d: weight rows ", weights.rows(), " != patch length ",
                                 g.patch_len()));
  return block_retile(add(matmul(im2col(x, g), weights), bias), x.rows());
}

// Mean softmax cross-entropy over integer class labels; numerically stable
// log-sum-exp, adjoint (softmax - onehot)/m.
inline Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  const int64_t m = logits.rows(), c = logits.cols();
  if (static_cast<int64_t>(labels.size()) != m)
    throw ValueError(detail::str("softmax_xent: ", labels.size(), " labels for ", m, " rows"));
  for (int64_t i = 0; i < m; ++i)
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
      throw ValueError(detail::str("softmax_xent: label ", labels[static_cast<size_t>(i)],
                                   " at row ", i, " outside [0,", c, ")"));
  auto lp = logits.ptr();
  std::vector<int> lab = labels;
  Tensor out = detail::make_result(1, 1, {lp}, [lp, m, c, lab](TensorNode& self) {
    if (!lp->requires_grad) return;
    const double g = self.grad[0] / static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i) {
      const double* row = lp->data.data() + i * c;
      double* grow = lp->grad.data() + i * c;
      double mx = row[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
      for (int64_t j = 0; j < c; ++j) {
        const double p = std::exp(row[j] - mx) / denom;
        grow[j] += g * (p - (j == lab[static_cast<size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = lp->data.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    total += std::log(denom) + mx - row[lab[static_cast<size_t>(i)]];
  }
  out.node().data[0] = total / static_cast<double>(m);
  return out;
}

}  // namespace hsvae
