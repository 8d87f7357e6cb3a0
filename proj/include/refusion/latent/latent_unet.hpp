// SPDX-License-Identifier: Apache-2.0
#pragma once

// Compression U-Net: an encoder maps an image to a latent at 1/d resolution
// plus one skip feature map per stage; the decoder rebuilds the image from a
// latent and skips. Diffusion can then run on latents.
//
// Encoder, per stage s = 0..S-1 (S = log2 d, width w_s = base * 2^s):
//   NafBlocks(w_s) -> skip_s (resolution H / 2^s) -> conv2x2 stride 2 (w_s -> 2 w_s)
// then middle NafBlocks at H/d and a 1x1 conv to the latent channels.
// Decoder mirrors it: 1x1 conv from the latent, middle blocks, then per stage
// 1x1 conv + pixel shuffle up, add skip_s, NafBlocks, and a final 3x3 conv.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <json.hpp>

#include "refusion/nn/layers.hpp"
#include "refusion/nn/noise_net.hpp"
#include "refusion/sde.hpp"
#include "refusion/tensor.hpp"

namespace refusion::latent {

struct LatentUNetConfig {
  int image_channels = 3;
  int down_factor = 4;       // d, per-side compression (4 or 8)
  int base_width = 16;
  int latent_channels = 0;   // 0 selects 4 * image_channels
  int blocks_per_stage = 1;
  int mid_blocks = 1;

  [[nodiscard]] int stages() const;
  [[nodiscard]] int resolved_latent_channels() const {
    return latent_channels > 0 ? latent_channels : 4 * image_channels;
  }
  void validate() const;
  friend bool operator==(const LatentUNetConfig&, const LatentUNetConfig&) = default;
};

nlohmann::json to_json(const LatentUNetConfig& cfg);
LatentUNetConfig unet_config_from_json(const nlohmann::json& j);

struct LatentPack {
  Tensor latent;              // [N, latent_channels, H/d, W/d]
  std::vector<Tensor> skips;  // skip s at [N, base * 2^s, H / 2^s, W / 2^s]
};

class LatentUNet {
 public:
  LatentUNet(const LatentUNetConfig& cfg, std::uint64_t init_seed);

  /// Rejects sizes not divisible by d, naming the padding needed.
  LatentPack encode(const Tensor& img);
  /// Clamps to [0,1] when `clamp`; training uses the raw output.
  Tensor decode(const LatentPack& pack, bool clamp = true);

  /// Backward of the most recent decode(clamp=false): returns gradients with
  /// respect to its latent and skips, accumulating decoder parameter grads.
  LatentPack backward_decode(const Tensor& grad_out);
  /// Backward of the most recent encode, accumulating encoder parameter grads.
  void backward_encode(const LatentPack& grad);

  nn::ParamList params();
  [[nodiscard]] const LatentUNetConfig& config() const { return cfg_; }
  [[nodiscard]] std::uint64_t encode_macs(int h, int w) const;
  [[nodiscard]] std::uint64_t decode_macs(int h, int w) const;
  /// Resolution and channel count each skip must have for an h x w image.
  [[nodiscard]] std::vector<Shape> skip_shapes(int n, int h, int w) const;

 private:
  LatentUNetConfig cfg_;
  nn::Conv2d intro_, to_latent_, from_latent_, ending_;
  std::vector<std::vector<nn::NafBlock>> enc_, dec_;
  std::vector<nn::NafBlock> enc_mid_, dec_mid_;
  std::vector<nn::Conv2d> downs_, ups_;
};

/// Losses and gradients of one latent-replacing step (no optimizer update).
struct ReplaceLosses {
  double loss_lq = 0.0;
  double loss_hq = 0.0;
};

/// Latent-replacing pretraining objective:
///   loss_lq = L1(decode(encode(lq)), lq)
///   loss_hq = L1(decode(latent of encode(hq), skips of encode(lq)), hq)
/// Gradients of loss_lq + loss_hq are accumulated into net's parameters.
/// `replica` must be structurally identical; it hosts the HQ branch and is
/// synchronised with `net` here. Throws Divergence on non-finite losses.
ReplaceLosses latent_replace_grads(LatentUNet& net, LatentUNet& replica, const Tensor& lq,
                                   const Tensor& hq);

/// Mean absolute difference and its gradient d/da.
double l1_loss(const Tensor& a, const Tensor& b, Tensor* grad_a = nullptr);

/// Encode LQ, run the reverse SDE on the latent with mu = LQ latent, decode
/// with the LQ skips. The noise network must work on latent channels.
Tensor latent_restore(const Tensor& lq, LatentUNet& unet, const sde::NoisePredictor& predict,
                      const sde::Schedule& sched, std::uint64_t seed);

/// Multiply-accumulates of the reverse-diffusion loop alone: steps forward
/// passes of the noise network at the given resolution.
std::uint64_t diffusion_loop_macs(const nn::NoiseNetwork& net, int h, int w, int steps);

// ---- tiling ----

struct TileOptions {
  int tile = 1024;
  int overlap = 64;
  int multiple = 1;  // spatial sizes passed to the function are multiples of this
};

/// Applies `fn` (shape-preserving) over overlapping tiles with linear blending
/// in the overlaps. Inputs within one tile are processed whole. Borders are
/// reflect-padded up to `multiple` and cropped afterwards.
Tensor tiled_apply(const Tensor& img, const std::function<Tensor(const Tensor&)>& fn,
                   TileOptions opt = {});
/// Reflect-pads bottom/right so both sides are multiples of `multiple`.
Tensor pad_to_multiple(const Tensor& img, int multiple);
Tensor crop(const Tensor& img, int y, int x, int h, int w);

// ---- checkpoints ----

void save_unet_checkpoint(const std::filesystem::path& path, LatentUNet& net,
                          const nlohmann::json& extra = nlohmann::json::object());
std::unique_ptr<LatentUNet> load_unet_checkpoint(const std::filesystem::path& path);

/// Records the file triple behind a latent restoration run.
struct PipelineManifest {
  std::filesystem::path unet;
  std::filesystem::path noise;
  std::string schedule;  // sde::serialize output
  std::string unet_digest;
  std::string noise_digest;

  [[nodiscard]] nlohmann::json to_json() const;
  static PipelineManifest from_json(const nlohmann::json& j);
};

void write_pipeline(const std::filesystem::path& path, const PipelineManifest& m);
/// Throws MissingInput when the manifest or a referenced file is absent and
/// ConfigError when a referenced file's digest no longer matches.
PipelineManifest read_pipeline(const std::filesystem::path& path);

}  // namespace refusion::latent
