// SPDX-License-Identifier: Apache-2.0
#include "refusion/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refusion/simd/kernels.hpp"

namespace refusion::nn {

namespace {

const simd::KernelTable& K() { return simd::active(); }

std::size_t idx(std::size_t a) { return a; }

}  // namespace

void zero_grad(const ParamList& params) {
  for (Param* p : params) p->grad.fill(0.0);
}

std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->value.size();
  return n;
}

void init_uniform_fan_in(Param& p, int fan_in, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  for (double& v : p.value.values()) v = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in, int out, int kernel, int stride, int pad, bool bias)
    : weight(name + ".weight", {out, in, kernel, kernel}),
      in_(in),
      out_(out),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(bias) {
  if (in < 1 || out < 1 || kernel < 1 || stride < 1 || pad < 0) {
    throw std::invalid_argument("Conv2d " + name + ": bad geometry");
  }
  if (bias) this->bias = Param(name + ".bias", {1, out, 1, 1});
}

void Conv2d::init(Rng& rng, double gain) {
  const int fan_in = in_ * k_ * k_;
  init_uniform_fan_in(weight, fan_in, rng, gain);
  if (has_bias_) init_uniform_fan_in(bias, fan_in, rng, gain);
}

void Conv2d::collect(ParamList& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

Shape Conv2d::out_shape(const Shape& in) const {
  return {in.n, out_, (in.h + 2 * pad_ - k_) / stride_ + 1, (in.w + 2 * pad_ - k_) / stride_ + 1};
}

std::uint64_t Conv2d::macs(int h, int w) const {
  const Shape o = out_shape({1, in_, h, w});
  return static_cast<std::uint64_t>(out_) * in_ * k_ * k_ * static_cast<std::uint64_t>(o.h) * o.w;
}

void Conv2d::im2col(const double* src, int h, int w, double* col) const {
  const int ho = (h + 2 * pad_ - k_) / stride_ + 1;
  const int wo = (w + 2 * pad_ - k_) / stride_ + 1;
  const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < in_; ++c) {
    const double* sp = src + idx(c) * h * w;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        double* row = col + ((idx(c) * k_ + ky) * k_ + kx) * plane_out;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          double* r = row + idx(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(r, wo, 0.0);
            continue;
          }
          const double* srow = sp + idx(iy) * w;
          if (stride_ == 1) {
            const int shift = kx - pad_;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wo, w - shift);
            std::fill_n(r, std::max(lo, 0), 0.0);
            if (hi > lo) std::copy(srow + lo + shift, srow + hi + shift, r + lo);
            for (int ox = std::max(hi, lo); ox < wo; ++ox) r[ox] = 0.0;
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              r[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const double* col, int h, int w, double* dst) const {
  const int ho = (h + 2 * pad_ - k_) / stride_ + 1;
  const int wo = (w + 2 * pad_ - k_) / stride_ + 1;
  const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < in_; ++c) {
    double* dp = dst + idx(c) * h * w;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const double* row = col + ((idx(c) * k_ + ky) * k_ + kx) * plane_out;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          const double* r = row + idx(oy) * wo;
          double* drow = dp + idx(iy) * w;
          if (stride_ == 1) {
            const int shift = kx - pad_;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wo, w - shift);
            if (hi > lo) K().axpy(static_cast<std::size_t>(hi - lo), 1.0, r + lo, drow + lo + shift);
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) drow[ix] += r[ox];
            }
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != in_) {
    throw std::invalid_argument(weight.name + ": expected " + std::to_string(in_) +
                                " input channels, got " + s.str());
  }
  input_ = x;
  const Shape os = out_shape(s);
  Tensor out(os);
  const int kk = in_ * k_ * k_;
  const int npix = os.h * os.w;
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kk) * npix);
  for (int n = 0; n < s.n; ++n) {
    double* o = out.sample(n);
    if (has_bias_) {
      for (int c = 0; c < out_; ++c) std::fill_n(o + idx(c) * npix, npix, bias.value[idx(c)]);
    }
    const double* b = x.sample(n);
    if (!pointwise) {
      im2col(x.sample(n), s.h, s.w, col.data());
      b = col.data();
    }
    K().gemm_nn(out_, npix, kk, weight.value.data(), kk, b, npix, o, npix);
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Shape& s = input_.shape();
  const Shape os = out_shape(s);
  if (grad_out.shape() != os) throw std::invalid_argument(weight.name + ": grad shape mismatch");
  Tensor dx(s);
  const int kk = in_ * k_ * k_;
  const int npix = os.h * os.w;
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kk) * npix);
  std::vector<double> dcol(pointwise ? 0 : static_cast<std::size_t>(kk) * npix);
  for (int n = 0; n < s.n; ++n) {
    const double* g = grad_out.sample(n);
    if (has_bias_) {
      for (int c = 0; c < out_; ++c) bias.grad[idx(c)] += K().sum(npix, g + idx(c) * npix);
    }
    const double* b = input_.sample(n);
    if (!pointwise) {
      im2col(input_.sample(n), s.h, s.w, col.data());
      b = col.data();
    }
    K().gemm_nt(out_, kk, npix, g, npix, b, npix, weight.grad.data(), kk);
    if (pointwise) {
      simd::gemm_tn(kk, npix, out_, weight.value.data(), kk, g, npix, dx.sample(n), npix);
    } else {
      std::fill(dcol.begin(), dcol.end(), 0.0);
      simd::gemm_tn(kk, npix, out_, weight.value.data(), kk, g, npix, dcol.data(), npix);
      col2im(dcol.data(), s.h, s.w, dx.sample(n));
    }
  }
  return dx;
}

// ------------------------------------------------------ DepthwiseConv3x3

DepthwiseConv3x3::DepthwiseConv3x3(std::string name, int channels)
    : weight(name + ".weight", {channels, 1, 3, 3}),
      bias(name + ".bias", {1, channels, 1, 1}),
      channels_(channels) {}

void DepthwiseConv3x3::init(Rng& rng) {
  init_uniform_fan_in(weight, 9, rng);
  init_uniform_fan_in(bias, 9, rng);
}

void DepthwiseConv3x3::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

std::uint64_t DepthwiseConv3x3::macs(int h, int w) const {
  return static_cast<std::uint64_t>(channels_) * 9 * static_cast<std::uint64_t>(h) * w;
}

Tensor DepthwiseConv3x3::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != channels_) throw std::invalid_argument(weight.name + ": channel mismatch");
  const int pw = s.w + 2;
  const int ph = s.h + 2;
  padded_ = Tensor({s.n, s.c, ph, pw});
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = x.plane(n, c);
      double* pad = padded_.plane(n, c);
      for (int y = 0; y < s.h; ++y) std::copy_n(src + idx(y) * s.w, s.w, pad + idx(y + 1) * pw + 1);
      const double* wt = weight.value.data() + idx(c) * 9;
      double* o = out.plane(n, c);
      std::fill_n(o, s.plane(), bias.value[idx(c)]);
      for (int y = 0; y < s.h; ++y) {
        double* orow = o + idx(y) * s.w;
        for (int ky = 0; ky < 3; ++ky) {
          const double* prow = pad + idx(y + ky) * pw;
          for (int kx = 0; kx < 3; ++kx) K().axpy(s.w, wt[ky * 3 + kx], prow + kx, orow);
        }
      }
    }
  }
  return out;
}

Tensor DepthwiseConv3x3::backward(const Tensor& grad_out) {
  const Shape& s = grad_out.shape();
  const int pw = s.w + 2;
  const int ph = s.h + 2;
  Tensor dx(s);
  std::vector<double> dpad(static_cast<std::size_t>(ph) * pw);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* g = grad_out.plane(n, c);
      const double* pad = padded_.plane(n, c);
      const double* wt = weight.value.data() + idx(c) * 9;
      double* dw = weight.grad.data() + idx(c) * 9;
      bias.grad[idx(c)] += K().sum(s.plane(), g);
      std::fill(dpad.begin(), dpad.end(), 0.0);
      for (int y = 0; y < s.h; ++y) {
        const double* grow = g + idx(y) * s.w;
        for (int ky = 0; ky < 3; ++ky) {
          const double* prow = pad + idx(y + ky) * pw;
          double* drow = dpad.data() + idx(y + ky) * pw;
          for (int kx = 0; kx < 3; ++kx) {
            dw[ky * 3 + kx] += K().dot(s.w, grow, prow + kx);
            K().axpy(s.w, wt[ky * 3 + kx], grow, drow + kx);
          }
        }
      }
      double* d = dx.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        std::copy_n(dpad.data() + idx(y + 1) * pw + 1, s.w, d + idx(y) * s.w);
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- LayerNorm2d

LayerNorm2d::LayerNorm2d(std::string name, int channels, double eps)
    : weight(name + ".weight", {1, channels, 1, 1}),
      bias(name + ".bias", {1, channels, 1, 1}),
      channels_(channels),
      eps_(eps) {
  weight.value.fill(1.0);
}

void LayerNorm2d::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Tensor LayerNorm2d::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != channels_) throw std::invalid_argument(weight.name + ": channel mismatch");
  const std::size_t np = s.plane();
  const double inv_c = 1.0 / s.c;
  xhat_ = Tensor(s);
  inv_std_ = Tensor({s.n, 1, s.h, s.w});
  Tensor out(s);
  std::vector<double> mean(np), var(np), diff(np);
  for (int n = 0; n < s.n; ++n) {
    std::fill(mean.begin(), mean.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (int c = 0; c < s.c; ++c) K().axpy(np, inv_c, x.plane(n, c), mean.data());
    for (int c = 0; c < s.c; ++c) {
      const double* xp = x.plane(n, c);
      for (std::size_t i = 0; i < np; ++i) diff[i] = xp[i] - mean[i];
      K().mul_add(np, diff.data(), diff.data(), var.data());
    }
    double* is = inv_std_.plane(n, 0);
    for (std::size_t i = 0; i < np; ++i) is[i] = 1.0 / std::sqrt(var[i] * inv_c + eps_);
    for (int c = 0; c < s.c; ++c) {
      const double* xp = x.plane(n, c);
      double* xh = xhat_.plane(n, c);
      for (std::size_t i = 0; i < np; ++i) xh[i] = (xp[i] - mean[i]) * is[i];
      K().affine(np, weight.value[idx(c)], bias.value[idx(c)], xh, out.plane(n, c));
    }
  }
  return out;
}

Tensor LayerNorm2d::backward(const Tensor& grad_out) {
  const Shape& s = grad_out.shape();
  const std::size_t np = s.plane();
  const double inv_c = 1.0 / s.c;
  Tensor dx(s);
  std::vector<double> mean_g(np), mean_gx(np), gh(np);
  for (int n = 0; n < s.n; ++n) {
    std::fill(mean_g.begin(), mean_g.end(), 0.0);
    std::fill(mean_gx.begin(), mean_gx.end(), 0.0);
    for (int c = 0; c < s.c; ++c) {
      const double* g = grad_out.plane(n, c);
      const double* xh = xhat_.plane(n, c);
      weight.grad[idx(c)] += K().dot(np, g, xh);
      bias.grad[idx(c)] += K().sum(np, g);
      const double wc = weight.value[idx(c)];
      K().axpy(np, wc * inv_c, g, mean_g.data());
      for (std::size_t i = 0; i < np; ++i) mean_gx[i] += wc * g[i] * xh[i] * inv_c;
    }
    const double* is = inv_std_.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const double* g = grad_out.plane(n, c);
      const double* xh = xhat_.plane(n, c);
      const double wc = weight.value[idx(c)];
      double* d = dx.plane(n, c);
      for (std::size_t i = 0; i < np; ++i) {
        d[i] = is[i] * (wc * g[i] - mean_g[i] - xh[i] * mean_gx[i]);
      }
    }
  }
  return dx;
}

// ------------------------------------------------------------ SimpleGate

Tensor SimpleGate::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c % 2 != 0) {
    throw std::invalid_argument("SimpleGate needs an even channel count, got " + s.str());
  }
  input_ = x;
  const int half = s.c / 2;
  Tensor out({s.n, half, s.h, s.w});
  const std::size_t block = static_cast<std::size_t>(half) * s.plane();
  for (int n = 0; n < s.n; ++n) {
    K().mul(block, x.sample(n), x.sample(n) + block, out.sample(n));
  }
  return out;
}

Tensor SimpleGate::backward(const Tensor& grad_out) {
  const Shape& s = input_.shape();
  const std::size_t block = static_cast<std::size_t>(s.c / 2) * s.plane();
  Tensor dx(s);
  for (int n = 0; n < s.n; ++n) {
    const double* a = input_.sample(n);
    const double* g = grad_out.sample(n);
    K().mul(block, g, a + block, dx.sample(n));
    K().mul(block, g, a, dx.sample(n) + block);
  }
  return dx;
}

// ---------------------------------------------------------- ChannelScale

ChannelScale::ChannelScale(std::string name, int channels)
    : weight(name + ".weight", {channels, channels, 1, 1}),
      bias(name + ".bias", {1, channels, 1, 1}),
      channels_(channels) {}

void ChannelScale::init(Rng& rng) {
  init_uniform_fan_in(weight, channels_, rng);
  init_uniform_fan_in(bias, channels_, rng);
}

void ChannelScale::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

std::uint64_t ChannelScale::macs(int, int) const {
  return static_cast<std::uint64_t>(channels_) * channels_;
}

Tensor ChannelScale::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != channels_) throw std::invalid_argument(weight.name + ": channel mismatch");
  input_ = x;
  const std::size_t np = s.plane();
  pooled_ = Tensor({s.n, s.c, 1, 1});
  gain_ = Tensor({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) pooled_.at(n, c, 0, 0) = K().sum(np, x.plane(n, c)) / np;
    for (int o = 0; o < s.c; ++o) {
      gain_.at(n, o, 0, 0) =
          bias.value[idx(o)] + K().dot(s.c, weight.value.data() + idx(o) * s.c, pooled_.sample(n));
    }
  }
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      K().affine(np, gain_.at(n, c, 0, 0), 0.0, x.plane(n, c), out.plane(n, c));
    }
  }
  return out;
}

Tensor ChannelScale::backward(const Tensor& grad_out) {
  const Shape& s = input_.shape();
  const std::size_t np = s.plane();
  Tensor dx(s);
  std::vector<double> dgain(static_cast<std::size_t>(s.c));
  std::vector<double> dpool(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      dgain[idx(c)] = K().dot(np, grad_out.plane(n, c), input_.plane(n, c));
    }
    std::fill(dpool.begin(), dpool.end(), 0.0);
    for (int o = 0; o < s.c; ++o) {
      bias.grad[idx(o)] += dgain[idx(o)];
      K().axpy(s.c, dgain[idx(o)], pooled_.sample(n), weight.grad.data() + idx(o) * s.c);
      K().axpy(s.c, dgain[idx(o)], weight.value.data() + idx(o) * s.c, dpool.data());
    }
    for (int c = 0; c < s.c; ++c) {
      K().affine(np, gain_.at(n, c, 0, 0), dpool[idx(c)] / np, grad_out.plane(n, c),
                 dx.plane(n, c));
    }
  }
  return dx;
}

// ------------------------------------------------ SigmoidChannelAttention

SigmoidChannelAttention::SigmoidChannelAttention(std::string name, int channels)
    : weight(name + ".weight", {channels, channels, 1, 1}),
      bias(name + ".bias", {1, channels, 1, 1}),
      channels_(channels) {}

void SigmoidChannelAttention::init(Rng& rng) {
  init_uniform_fan_in(weight, channels_, rng);
  init_uniform_fan_in(bias, channels_, rng);
}

void SigmoidChannelAttention::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

std::uint64_t SigmoidChannelAttention::macs(int, int) const {
  return static_cast<std::uint64_t>(channels_) * channels_;
}

Tensor SigmoidChannelAttention::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != channels_) throw std::invalid_argument(weight.name + ": channel mismatch");
  input_ = x;
  const std::size_t np = s.plane();
  pooled_ = Tensor({s.n, s.c, 1, 1});
  gate_ = Tensor({s.n, s.c, 1, 1});
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) pooled_.at(n, c, 0, 0) = K().sum(np, x.plane(n, c)) / np;
    for (int o = 0; o < s.c; ++o) {
      const double z =
          bias.value[idx(o)] + K().dot(s.c, weight.value.data() + idx(o) * s.c, pooled_.sample(n));
      gate_.at(n, o, 0, 0) = 1.0 / (1.0 + std::exp(-z));
    }
    for (int c = 0; c < s.c; ++c) {
      K().affine(np, gate_.at(n, c, 0, 0), 0.0, x.plane(n, c), out.plane(n, c));
    }
  }
  return out;
}

Tensor SigmoidChannelAttention::backward(const Tensor& grad_out) {
  const Shape& s = input_.shape();
  const std::size_t np = s.plane();
  Tensor dx(s);
  std::vector<double> dz(static_cast<std::size_t>(s.c));
  std::vector<double> dpool(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double g = gate_.at(n, c, 0, 0);
      dz[idx(c)] = K().dot(np, grad_out.plane(n, c), input_.plane(n, c)) * g * (1.0 - g);
    }
    std::fill(dpool.begin(), dpool.end(), 0.0);
    for (int o = 0; o < s.c; ++o) {
      bias.grad[idx(o)] += dz[idx(o)];
      K().axpy(s.c, dz[idx(o)], pooled_.sample(n), weight.grad.data() + idx(o) * s.c);
      K().axpy(s.c, dz[idx(o)], weight.value.data() + idx(o) * s.c, dpool.data());
    }
    for (int c = 0; c < s.c; ++c) {
      K().affine(np, gate_.at(n, c, 0, 0), dpool[idx(c)] / np, grad_out.plane(n, c),
                 dx.plane(n, c));
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out)
    : weight(name + ".weight", {out, in, 1, 1}),
      bias(name + ".bias", {1, out, 1, 1}),
      in_(in),
      out_(out) {}

void Linear::init(Rng& rng, double gain) {
  init_uniform_fan_in(weight, in_, rng, gain);
  init_uniform_fan_in(bias, in_, rng, gain);
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Tensor Linear::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c * s.h * s.w != in_) throw std::invalid_argument(weight.name + ": input width mismatch");
  input_ = x;
  Tensor out({s.n, out_, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < out_; ++o) {
      out.at(n, o, 0, 0) =
          bias.value[idx(o)] + K().dot(in_, weight.value.data() + idx(o) * in_, x.sample(n));
    }
  }
  return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const Shape& s = input_.shape();
  Tensor dx(s);
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < out_; ++o) {
      const double g = grad_out.at(n, o, 0, 0);
      bias.grad[idx(o)] += g;
      K().axpy(in_, g, input_.sample(n), weight.grad.data() + idx(o) * in_);
      K().axpy(in_, g, weight.value.data() + idx(o) * in_, dx.sample(n));
    }
  }
  return dx;
}

// -------------------------------------------------------------- Modulate

Tensor Modulate::forward(const Tensor& h, const Tensor& cond, int shift_block, int scale_block) {
  const Shape& s = h.shape();
  const int c = s.c;
  if (cond.shape().n != s.n || cond.shape().c < c * (std::max(shift_block, scale_block) + 1)) {
    throw std::invalid_argument("Modulate: conditioning vector too small");
  }
  h_ = h;
  shift_block_ = shift_block;
  scale_block_ = scale_block;
  scale_ = Tensor({s.n, c, 1, 1});
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const double sc = cond.at(n, scale_block * c + ch, 0, 0);
      const double sh = cond.at(n, shift_block * c + ch, 0, 0);
      scale_.at(n, ch, 0, 0) = sc;
      K().affine(s.plane(), 1.0 + sc, sh, h.plane(n, ch), out.plane(n, ch));
    }
  }
  return out;
}

Tensor Modulate::backward(const Tensor& grad_out, Tensor& grad_cond) {
  const Shape& s = h_.shape();
  const int c = s.c;
  Tensor dh(s);
  for (int n = 0; n < s.n; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const double* g = grad_out.plane(n, ch);
      grad_cond.at(n, scale_block_ * c + ch, 0, 0) += K().dot(s.plane(), g, h_.plane(n, ch));
      grad_cond.at(n, shift_block_ * c + ch, 0, 0) += K().sum(s.plane(), g);
      K().affine(s.plane(), 1.0 + scale_.at(n, ch, 0, 0), 0.0, g, dh.plane(n, ch));
    }
  }
  return dh;
}

// ------------------------------------------------------------------ SiLU

Tensor SiLU::forward(const Tensor& x) {
  input_ = x;
  Tensor out = x;
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return out;
}

Tensor SiLU::backward(const Tensor& grad_out) {
  Tensor dx(input_.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double x = input_[i];
    const double sg = 1.0 / (1.0 + std::exp(-x));
    dx[i] = grad_out[i] * sg * (1.0 + x * (1.0 - sg));
  }
  return dx;
}

// --------------------------------------------------------- PixelShuffle2

Tensor PixelShuffle2::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c % 4 != 0) throw std::invalid_argument("PixelShuffle2 needs channels divisible by 4");
  const int c = s.c / 4;
  Tensor out({s.n, c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          const double* src = x.plane(n, ch * 4 + i * 2 + j);
          for (int y = 0; y < s.h; ++y) {
            for (int xx = 0; xx < s.w; ++xx) {
              out.at(n, ch, 2 * y + i, 2 * xx + j) = src[idx(y) * s.w + xx];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor PixelShuffle2::backward(const Tensor& grad_out) {
  const Shape& s = grad_out.shape();
  const int h = s.h / 2;
  const int w = s.w / 2;
  Tensor dx({s.n, s.c * 4, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int ch = 0; ch < s.c; ++ch) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          double* dst = dx.plane(n, ch * 4 + i * 2 + j);
          for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
              dst[idx(y) * w + xx] = grad_out.at(n, ch, 2 * y + i, 2 * xx + j);
            }
          }
        }
      }
    }
  }
  return dx;
}

std::vector<double> sinusoidal_embedding(int step, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("embedding dim must be even >= 2");
  const int half = dim / 2;
  const double scale = std::log(10000.0) / std::max(half - 1, 1);
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int k = 0; k < half; ++k) {
    const double arg = step * std::exp(-scale * k);
    out[idx(k)] = std::sin(arg);
    out[idx(k + half)] = std::cos(arg);
  }
  return out;
}

}  // namespace refusion::nn
