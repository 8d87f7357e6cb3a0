// SPDX-License-Identifier: Apache-2.0
#include "refusion/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "refusion/simd/kernels.hpp"

namespace refusion::metrics {

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw std::invalid_argument("mse of empty images");
  return simd::active().sq_diff_sum(a.size(), a.data(), b.data()) / static_cast<double>(a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m < kPsnrCapMse) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double rmse(const Tensor& a, const Tensor& b) { return 255.0 * std::sqrt(mse(a, b)); }

Tensor luma(const Tensor& img) {
  const Shape& s = img.shape();
  if (s.c == 1) return img;
  if (s.c != 3) throw std::invalid_argument("luma expects 1 or 3 channels, got " + s.str());
  Tensor y({s.n, 1, s.h, s.w});
  const std::size_t np = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const double* r = img.plane(n, 0);
    const double* g = img.plane(n, 1);
    const double* b = img.plane(n, 2);
    double* out = y.plane(n, 0);
    for (std::size_t i = 0; i < np; ++i) out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  }
  return y;
}

namespace {

std::vector<double> window_1d(const SsimOptions& opt) {
  std::vector<double> w(static_cast<std::size_t>(opt.window));
  if (opt.kind == SsimWindow::uniform) {
    for (double& v : w) v = 1.0 / opt.window;
    return w;
  }
  const double centre = (opt.window - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < opt.window; ++i) {
    const double d = i - centre;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * opt.sigma * opt.sigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= total;
  return w;
}

// Separable valid filtering of an h x w plane.
std::vector<double> filter_valid(const double* src, int h, int w, const std::vector<double>& k) {
  const int kw = static_cast<int>(k.size());
  const int oh = h - kw + 1, ow = w - kw + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kw; ++i) acc += k[static_cast<std::size_t>(i)] * src[y * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kw; ++i) acc += k[static_cast<std::size_t>(i)] * tmp[(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, SsimOptions opt) {
  require_same_shape(a, b, "ssim");
  const Shape& s = a.shape();
  if (opt.window < 1 || s.h < opt.window || s.w < opt.window) {
    throw std::invalid_argument("ssim: image " + s.str() + " smaller than the " +
                                std::to_string(opt.window) + "-pixel window");
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const Tensor ya = luma(a), yb = luma(b);
  const auto k = window_1d(opt);
  const std::size_t np = s.plane();
  std::vector<double> aa(np), bb(np), ab(np);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const double* pa = ya.plane(n, 0);
    const double* pb = yb.plane(n, 0);
    for (std::size_t i = 0; i < np; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_valid(pa, s.h, s.w, k);
    const auto mu_b = filter_valid(pb, s.h, s.w, k);
    const auto e_aa = filter_valid(aa.data(), s.h, s.w, k);
    const auto e_bb = filter_valid(bb.data(), s.h, s.w, k);
    const auto e_ab = filter_valid(ab.data(), s.h, s.w, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma;
      const double vb = e_bb[i] - mb * mb;
      const double cov = e_ab[i] - ma * mb;
      acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
             ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / s.n;
}

MetricReport evaluate(const Tensor& pred, const Tensor& ref) {
  MetricReport r;
  r.psnr = psnr(pred, ref);
  r.rmse = rmse(pred, ref);
  const int min_side = std::min(ref.shape().h, ref.shape().w);
  SsimOptions opt;
  if (min_side < opt.window) opt.window = min_side;
  r.ssim = ssim(pred, ref, opt);
  return r;
}

}  // namespace refusion::metrics
