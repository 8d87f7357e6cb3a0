// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layers with hand-written backward passes. A layer's forward() caches what
// its backward() needs, so one instance serves one forward/backward pair at a
// time. backward() accumulates parameter gradients into Param::grad and
// returns the gradient with respect to the layer input.
//
// macs() counts multiply-accumulates of the dense arithmetic (convolutions,
// linear maps) for one sample, derived from layer shapes only.

#include <cstdint>
#include <string>
#include <vector>

#include "refusion/rng.hpp"
#include "refusion/tensor.hpp"

namespace refusion::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}
};

using ParamList = std::vector<Param*>;

void zero_grad(const ParamList& params);
std::size_t count_params(const ParamList& params);

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear.
void init_uniform_fan_in(Param& p, int fan_in, Rng& rng, double gain = 1.0);

/// 2-D convolution, square kernel, zero padding, groups = 1.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int kernel, int stride, int pad, bool bias = true);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

  void init(Rng& rng, double gain = 1.0);
  void collect(ParamList& out);
  [[nodiscard]] Shape out_shape(const Shape& in) const;
  [[nodiscard]] std::uint64_t macs(int h, int w) const;

  Param weight;  // [out, in, k, k]
  Param bias;    // [1, out, 1, 1]; empty when bias disabled

 private:
  void im2col(const double* src, int h, int w, double* col) const;
  void col2im(const double* col, int h, int w, double* dst) const;

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  Tensor input_;
};

/// Depthwise 3x3 convolution, stride 1, padding 1.
class DepthwiseConv3x3 {
 public:
  DepthwiseConv3x3() = default;
  DepthwiseConv3x3(std::string name, int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs(int h, int w) const;

  Param weight;  // [C, 1, 3, 3]
  Param bias;    // [1, C, 1, 1]

 private:
  int channels_ = 0;
  Tensor padded_;  // cached zero-padded input
};

/// Layer normalisation across channels at each pixel, with per-channel
/// affine parameters.
class LayerNorm2d {
 public:
  LayerNorm2d() = default;
  LayerNorm2d(std::string name, int channels, double eps = 1e-6);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParamList& out);

  Param weight;
  Param bias;

 private:
  int channels_ = 0;
  double eps_ = 1e-6;
  Tensor xhat_;
  Tensor inv_std_;  // [N, 1, H, W]
};

/// Splits channels into halves and multiplies them elementwise.
class SimpleGate {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

 private:
  Tensor input_;
};

/// Simple channel attention: global average pool, pointwise linear map,
/// per-channel rescale of the input.
class ChannelScale {
 public:
  ChannelScale() = default;
  ChannelScale(std::string name, int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs(int h, int w) const;

  Param weight;  // [C, C, 1, 1]
  Param bias;    // [1, C, 1, 1]

 private:
  int channels_ = 0;
  Tensor input_;
  Tensor pooled_;  // [N, C, 1, 1]
  Tensor gain_;    // [N, C, 1, 1]
};

/// Channel attention with a sigmoid gate (used by the U-Net baseline).
class SigmoidChannelAttention {
 public:
  SigmoidChannelAttention() = default;
  SigmoidChannelAttention(std::string name, int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs(int h, int w) const;

  Param weight;
  Param bias;

 private:
  int channels_ = 0;
  Tensor input_;
  Tensor pooled_;
  Tensor gate_;
};

/// Affine map on [N, in, 1, 1] vectors.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void init(Rng& rng, double gain = 1.0);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs() const {
    return static_cast<std::uint64_t>(in_) * static_cast<std::uint64_t>(out_);
  }

  Param weight;  // [out, in, 1, 1]
  Param bias;

 private:
  int in_ = 0, out_ = 0;
  Tensor input_;
};

/// h * (1 + scale) + shift with per-sample, per-channel scale and shift
/// taken from channel blocks of a conditioning vector.
class Modulate {
 public:
  // `cond` is [N, K*C, 1, 1]; scale/shift are blocks scale_block/shift_block.
  Tensor forward(const Tensor& h, const Tensor& cond, int shift_block, int scale_block);
  // Returns dh; accumulates into grad_cond (same shape as cond).
  Tensor backward(const Tensor& grad_out, Tensor& grad_cond);

 private:
  Tensor h_;
  Tensor scale_;  // [N, C] copy
  int shift_block_ = 0, scale_block_ = 0;
};

class SiLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

 private:
  Tensor input_;
};

/// Rearranges [N, 4C, H, W] into [N, C, 2H, 2W].
class PixelShuffle2 {
 public:
  static Tensor forward(const Tensor& x);
  static Tensor backward(const Tensor& grad_out);
};

/// Sinusoidal embedding of an integer step, [sin(t f_k)..., cos(t f_k)...]
/// with geometric frequencies f_k = 10000^(-k/(dim/2 - 1)).
std::vector<double> sinusoidal_embedding(int step, int dim);

}  // namespace refusion::nn
