// SPDX-License-Identifier: Apache-2.0
#pragma once

// Noise-network training: losses, optimizers (Adam, AdamW, Lion), learning
// rate schedules, the training loop with periodic validation, and the
// ablation runner that repeats training across one configuration axis.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refusion/io/config.hpp"
#include "refusion/latent/latent_unet.hpp"
#include "refusion/nn/layers.hpp"
#include "refusion/nn/noise_net.hpp"
#include "refusion/sde.hpp"
#include "refusion/tensor.hpp"

namespace refusion::train {

// ---- learning-rate schedules ----

/// lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2, exact at both ends.
double cosine_lr(int step, int total, double lr0, double lr_min);
/// lr0 * gamma^(number of milestones <= step). Milestones must be ascending.
double multistep_lr(int step, std::span<const int> milestones, double lr0, double gamma);

// ---- optimizers ----

enum class OptimizerFamily { adam, adamw, lion };
enum class LrScheduler { multistep, cosine };

std::string_view to_string(OptimizerFamily f);
OptimizerFamily parse_family(std::string_view s);
std::string_view to_string(LrScheduler s);
LrScheduler parse_scheduler(std::string_view s);

struct OptimizerSpec {
  OptimizerFamily family = OptimizerFamily::lion;
  double lr0 = 3e-5;
  double lr_min = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
  double eps = 1e-8;  // Adam/AdamW denominator
  LrScheduler scheduler = LrScheduler::cosine;
  std::vector<int> milestones;
  double gamma = 0.5;
  int total_steps = 1;

  void validate() const;
  [[nodiscard]] double lr_at(int step) const;
};

/// c = b1 m + (1 - b1) g; p -= lr (sign(c) + wd p); m = b2 m + (1 - b2) g.
void lion_step(std::span<double> p, std::span<const double> g, std::span<double> m, double lr,
               double beta1, double beta2, double weight_decay);
/// Adam with L2 regularisation folded into the gradient; `t` counts from 1.
void adam_step(std::span<double> p, std::span<const double> g, std::span<double> m,
               std::span<double> v, int t, double lr, double beta1, double beta2,
               double weight_decay, double eps);
/// AdamW: p *= 1 - lr wd, then the plain Adam update.
void adamw_step(std::span<double> p, std::span<const double> g, std::span<double> m,
                std::span<double> v, int t, double lr, double beta1, double beta2,
                double weight_decay, double eps);

/// Optimizer state for a parameter list.
class Optimizer {
 public:
  Optimizer(const OptimizerSpec& spec, nn::ParamList params);
  /// Applies one update with the learning rate of `step` (0-based). Throws
  /// Divergence when a gradient is non-finite; parameters are then untouched.
  void step(int step);
  [[nodiscard]] const OptimizerSpec& spec() const { return spec_; }

 private:
  OptimizerSpec spec_;
  nn::ParamList params_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

// ---- losses ----

enum class LossKind { l1, ml };
std::string_view to_string(LossKind k);
LossKind parse_loss(std::string_view s);

/// Mean absolute error between predicted and true noise.
double noise_matching_loss(const Tensor& eps_hat, const Tensor& eps);

/// Posterior-mean target for x_{t-1} given x_t and x_0 (the optimal reverse
/// state of the mean-reverting process), per sample step.
Tensor optimal_previous_state(const Tensor& x_t, const Tensor& x0, const Tensor& mu,
                              std::span<const int> steps, const sde::Schedule& sched);

/// Loss value and gradient d loss / d eps_hat for one batch.
struct LossEval {
  double value = 0.0;
  Tensor grad;
};
/// l1: mean |eps_hat - eps|. ml: mean |x_hat_{t-1} - x*_{t-1}| where x_hat is
/// the drift-only reverse step driven by eps_hat.
LossEval evaluate_loss(LossKind kind, const Tensor& eps_hat, const Tensor& eps, const Tensor& x_t,
                       const Tensor& x0, const Tensor& mu, std::span<const int> steps,
                       const sde::Schedule& sched);

// ---- training ----

enum class Space { pixel, latent };
std::string_view to_string(Space s);
Space parse_space(std::string_view s);

/// Draws training indices without replacement: every run of n consecutive
/// draws is one shuffled pass over [0, n). Each epoch's order depends only
/// on the seed and the epoch number.
class EpochSampler {
 public:
  EpochSampler(std::uint64_t seed, int n);
  /// Index for draw number `position` (0-based, counted over the whole run).
  int at(std::int64_t position);
  /// Indices for one batch of `batch` draws starting at iteration * batch.
  std::vector<int> batch(int iteration, int batch);

 private:
  std::uint64_t seed_;
  int n_;
  std::int64_t epoch_ = -1;
  std::vector<int> order_;
};

struct TrainConfig {
  double noise_level = 50.0;  // lambda * 255
  int steps_T = 100;
  double theta_bar = 6.0;     // terminal cumulative rate of the constant schedule
  int patch = 256;
  int batch = 8;
  int iterations = 1000;
  OptimizerSpec optimizer;
  Space space = Space::pixel;
  LossKind loss = LossKind::l1;
  std::uint64_t seed = 0;
  int val_every = 500;
  int val_steps = 25;
  std::uint64_t val_seed = 1;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_path;

  void validate(int net_stride) const;
  [[nodiscard]] sde::Schedule schedule() const;
  [[nodiscard]] sde::Schedule validation_schedule() const;
  /// Flat key view ("train.batch", "sde.noise_level", ...) used for config
  /// files, manifests and ablation diffs.
  [[nodiscard]] io::Config to_config() const;
  static TrainConfig from_config(const io::Config& cfg);
};

struct PairData {
  Tensor lq;
  Tensor hq;
  [[nodiscard]] int size() const { return lq.shape().n; }
};

struct HistoryRow {
  int step = 0;  // 1-based iteration index
  double loss = 0.0;
  double lr = 0.0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<HistoryRow> history;
  double baseline_psnr = std::numeric_limits<double>::quiet_NaN();  // LQ vs HQ on validation
  double final_val_psnr = std::numeric_limits<double>::quiet_NaN();
};

/// Noise predictor for a sampler with `sched.steps` steps using a network
/// trained on `train_T` steps: sampler step s queries step round(s * train_T / T).
sde::NoisePredictor mapped_predictor(nn::NoiseNetwork& net, int train_T,
                                     const sde::Schedule& sched);

/// Restores validation LQ images with `net` on `sched`, mapping sampler step
/// s to the training step round(s * train_T / sched.steps); returns the mean
/// per-image PSNR against HQ. With a U-Net the restoration runs in latent
/// space and the result is decoded with the LQ skips.
double validate(nn::NoiseNetwork& net, const PairData& val, const sde::Schedule& sched,
                int train_T, std::uint64_t seed, latent::LatentUNet* unet = nullptr);

/// Mean per-image PSNR of LQ against HQ.
double baseline_psnr(const PairData& val);

struct TrainHooks {
  /// Called after each iteration with the new history row.
  std::function<void(const HistoryRow&)> on_step;
};

/// Trains `net` in place. For Space::latent a frozen `unet` must be given;
/// training pairs are then its encoder latents. Validation runs every
/// val_every iterations and after the last one (when `val` is nonempty).
/// Throws Divergence naming the iteration on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const PairData& data, const PairData& val,
                  nn::NoiseNetwork& net, latent::LatentUNet* unet = nullptr,
                  const TrainHooks& hooks = {});

/// Encodes images in chunks with a frozen U-Net (latents only).
Tensor encode_latents(latent::LatentUNet& unet, const Tensor& images, int chunk = 8);

// ---- U-Net pretraining ----

struct UNetTrainConfig {
  int iterations = 2000;
  int batch = 4;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
};

struct UNetHistoryRow {
  int step = 0;
  double loss_lq = 0.0;
  double loss_hq = 0.0;
  double lr = 0.0;
};

std::vector<UNetHistoryRow> pretrain_unet(const UNetTrainConfig& cfg, const PairData& data,
                                          latent::LatentUNet& net);

/// Mean per-image PSNR of decode(encode(x)) against x.
double reconstruction_psnr(latent::LatentUNet& net, const Tensor& images, int chunk = 8);

/// Trailing moving average with the given window (first window-1 entries
/// average what is available).
std::vector<double> moving_average(std::span<const double> values, int window);

// ---- ablation ----

enum class AblationAxis { noise_level, steps, patch, optimizer };
std::string_view to_string(AblationAxis a);
AblationAxis parse_axis(std::string_view s);
/// Grid used when no values are given.
std::vector<std::string> default_values(AblationAxis a);
/// Applies one axis value to a copy of `base`. Optimizer values read
/// "family+scheduler" with an optional "@lr" suffix, e.g. "lion+cosine@1e-4".
TrainConfig apply_axis(const TrainConfig& base, AblationAxis axis, const std::string& value);

struct AblationCell {
  std::string value;
  TrainConfig cfg;
  TrainResult result;
  bool failed = false;
  std::string error;
  std::vector<std::string> config_diff;  // "key: base -> cell" entries
};

struct AblationResult {
  AblationAxis axis = AblationAxis::noise_level;
  std::vector<AblationCell> cells;
};

using DataProvider = std::function<std::pair<PairData, PairData>(const TrainConfig&)>;

/// One train() per value with equal budgets and seeds; a failing cell is
/// recorded and the remaining cells still run.
AblationResult ablate(AblationAxis axis, const std::vector<std::string>& values,
                      const TrainConfig& base, const nn::NoiseNetConfig& net_cfg,
                      std::uint64_t net_seed, const DataProvider& data);

/// Writes <dir>/ablation_<axis>.csv (one row per cell), the per-step curves
/// CSV and a PNG plot of the validation curves. Returns the written paths.
std::vector<std::filesystem::path> write_ablation(const AblationResult& r,
                                                  const std::filesystem::path& dir);

/// Writes the history CSV (step, loss, lr, val_psnr) and loss/PSNR plots.
std::vector<std::filesystem::path> write_history(const TrainResult& r,
                                                 const std::filesystem::path& dir);

}  // namespace refusion::train
