// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "refusion/nn/layers.hpp"
#include "refusion/tensor.hpp"

namespace refusion::nn {

enum class Backbone { nafnet, unet };

std::string_view to_string(Backbone b);
Backbone parse_backbone(std::string_view s);

struct NoiseNetConfig {
  Backbone backbone = Backbone::nafnet;
  int image_channels = 3;  // channels of x_t (and of mu)
  int width = 16;
  std::vector<int> enc_blocks{1, 1, 1};
  int mid_blocks = 1;
  std::vector<int> dec_blocks{1, 1, 1};
  int time_dim = 32;

  [[nodiscard]] int in_channels() const { return 2 * image_channels; }
  [[nodiscard]] int stages() const { return static_cast<int>(enc_blocks.size()); }
  /// Spatial sizes must be multiples of this.
  [[nodiscard]] int stride() const { return 1 << stages(); }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const NoiseNetConfig&, const NoiseNetConfig&) = default;
};

/// Time-conditioned eps-predictor: eps_hat = f(concat(x_t, mu), step).
class NoiseNetwork {
 public:
  virtual ~NoiseNetwork() = default;

  /// One step per batch sample. Caches activations for backward().
  virtual Tensor forward(const Tensor& x_t, const Tensor& mu, std::span<const int> steps) = 0;
  /// Accumulates parameter gradients for dLoss/d(output) = grad_out.
  virtual void backward(const Tensor& grad_out) = 0;
  virtual ParamList params() = 0;
  /// Multiply-accumulates of one forward pass on an h x w input, one sample.
  [[nodiscard]] virtual std::uint64_t macs(int h, int w) const = 0;
  [[nodiscard]] virtual const NoiseNetConfig& config() const = 0;

  /// Same step for every sample.
  Tensor predict(const Tensor& x_t, const Tensor& mu, int step);
  [[nodiscard]] std::size_t param_count();
};

/// Throws std::invalid_argument naming the padding needed when the input is
/// not a multiple of the network stride.
void check_spatial(const Shape& s, int stride, const char* what);

/// Sinusoidal step encoding followed by Linear -> SimpleGate -> Linear.
class TimeMlp {
 public:
  TimeMlp() = default;
  TimeMlp(const std::string& name, int dim);

  /// Base sinusoidal encodings stacked as [N, dim, 1, 1].
  [[nodiscard]] Tensor base(std::span<const int> steps) const;
  Tensor forward(std::span<const int> steps);
  void backward(const Tensor& grad_out);
  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs() const { return fc1_.macs() + fc2_.macs(); }

 private:
  int dim_ = 0;
  Linear fc1_;
  SimpleGate gate_;
  Linear fc2_;
};

/// NAFBlock with time modulation. `time_dim == 0` builds the plain block
/// (no modulation), used inside the compression U-Net.
///
/// attention half:  x -> LN -> mod(shift0, scale0) -> 1x1 (C->2C) -> dw3x3
///                    -> SimpleGate -> SCA -> 1x1 (C->C) -> + x
/// feed-forward:    y -> LN -> mod(shift1, scale1) -> 1x1 (C->2C)
///                    -> SimpleGate -> 1x1 (C->C) -> + y
/// The per-block time projection is SimpleGate(t) -> Linear(time_dim/2 -> 4C),
/// split as [shift0, scale0, shift1, scale1].
class NafBlock {
 public:
  NafBlock() = default;
  NafBlock(const std::string& name, int channels, int time_dim);

  /// `temb` may be null; then no modulation is applied.
  Tensor forward(const Tensor& x, const Tensor* temb);
  /// Accumulates into `grad_temb` when the block is time-conditioned.
  Tensor backward(const Tensor& grad_out, Tensor* grad_temb);

  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs(int h, int w) const;
  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] bool time_conditioned() const { return time_dim_ > 0; }

  LayerNorm2d norm1, norm2;
  Conv2d conv1, conv3, conv4, conv5;
  DepthwiseConv3x3 dwconv;
  ChannelScale sca;
  Linear time_proj;

 private:
  int channels_ = 0;
  int time_dim_ = 0;
  SimpleGate gate1_, gate2_, time_gate_;
  Modulate mod1_, mod2_;
  Tensor cond_;
  bool used_time_ = false;
};

/// Encoder/decoder of NAFBlocks: strided 2x2 conv down, 1x1 conv + pixel
/// shuffle up, additive skips. Input is concat(x_t, mu).
class NafNet final : public NoiseNetwork {
 public:
  NafNet(const NoiseNetConfig& cfg, std::uint64_t init_seed);

  Tensor forward(const Tensor& x_t, const Tensor& mu, std::span<const int> steps) override;
  void backward(const Tensor& grad_out) override;
  ParamList params() override;
  [[nodiscard]] std::uint64_t macs(int h, int w) const override;
  [[nodiscard]] const NoiseNetConfig& config() const override { return cfg_; }

  /// Blocks in execution order: encoder stages, middle, decoder stages.
  std::vector<NafBlock*> blocks();
  TimeMlp& time_mlp() { return time_mlp_; }

 private:
  NoiseNetConfig cfg_;
  TimeMlp time_mlp_;
  Conv2d intro_, ending_;
  std::vector<std::vector<NafBlock>> encoders_, decoders_;
  std::vector<NafBlock> middle_;
  std::vector<Conv2d> downs_, ups_;
  Tensor temb_;
};

/// Residual block of the U-Net baseline:
///   h = conv3x3(SiLU(LN(x))), h = h*(1+scale)+shift from the time vector,
///   h = conv3x3(SiLU(LN(h))), out = h + skip(x).
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, int in, int out, int time_dim);

  Tensor forward(const Tensor& x, const Tensor& temb);
  Tensor backward(const Tensor& grad_out, Tensor& grad_temb);
  void init(Rng& rng);
  void collect(ParamList& out);
  [[nodiscard]] std::uint64_t macs(int h, int w) const;

 private:
  int in_ = 0, out_ = 0;
  LayerNorm2d norm1_, norm2_;
  SiLU act1_, act2_, time_act_;
  Conv2d conv1_, conv2_, skip_;
  Linear time_proj_;
  Modulate mod_;
  Tensor cond_;
};

/// Residual U-Net with channel attention in the bottleneck and
/// concatenated skips; the comparison backbone.
class UNetBaseline final : public NoiseNetwork {
 public:
  UNetBaseline(const NoiseNetConfig& cfg, std::uint64_t init_seed);

  Tensor forward(const Tensor& x_t, const Tensor& mu, std::span<const int> steps) override;
  void backward(const Tensor& grad_out) override;
  ParamList params() override;
  [[nodiscard]] std::uint64_t macs(int h, int w) const override;
  [[nodiscard]] const NoiseNetConfig& config() const override { return cfg_; }

 private:
  NoiseNetConfig cfg_;
  Linear t_fc1_, t_fc2_;
  SiLU t_act_;
  Conv2d intro_, ending_;
  std::vector<std::vector<ResBlock>> encoders_, decoders_;
  std::vector<ResBlock> middle_;
  SigmoidChannelAttention mid_attn_;
  std::vector<Conv2d> downs_, ups_;
  std::vector<int> skip_channels_;
  Tensor temb_;
};

std::unique_ptr<NoiseNetwork> make_noise_network(const NoiseNetConfig& cfg,
                                                 std::uint64_t init_seed);

}  // namespace refusion::nn
