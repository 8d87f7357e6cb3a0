// SPDX-License-Identifier: Apache-2.0
#include "refusion/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>
#include <sstream>

#include "refusion/errors.hpp"
#include "refusion/io/table.hpp"
#include "refusion/metrics.hpp"
#include "refusion/nn/checkpoint.hpp"
#include "refusion/rng.hpp"

namespace refusion::train {

// ---- learning-rate schedules ----

double cosine_lr(int step, int total, double lr0, double lr_min) {
  if (total < 1 || step < 0 || step > total) {
    throw std::invalid_argument("cosine_lr: need 0 <= step <= total, total >= 1");
  }
  if (step == 0) return lr0;
  if (step == total) return lr_min;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c);
}

double multistep_lr(int step, std::span<const int> milestones, double lr0, double gamma) {
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw std::invalid_argument("multistep_lr: milestones must be ascending");
  }
  const auto passed = std::upper_bound(milestones.begin(), milestones.end(), step) - milestones.begin();
  return lr0 * std::pow(gamma, static_cast<double>(passed));
}

// ---- names ----

std::string_view to_string(OptimizerFamily f) {
  switch (f) {
    case OptimizerFamily::adam: return "adam";
    case OptimizerFamily::adamw: return "adamw";
    case OptimizerFamily::lion: return "lion";
  }
  return "adam";
}

OptimizerFamily parse_family(std::string_view s) {
  if (s == "adam") return OptimizerFamily::adam;
  if (s == "adamw") return OptimizerFamily::adamw;
  if (s == "lion") return OptimizerFamily::lion;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (adam, adamw, lion)");
}

std::string_view to_string(LrScheduler s) { return s == LrScheduler::cosine ? "cosine" : "multistep"; }

LrScheduler parse_scheduler(std::string_view s) {
  if (s == "cosine") return LrScheduler::cosine;
  if (s == "multistep") return LrScheduler::multistep;
  throw ConfigError("unknown scheduler '" + std::string(s) + "' (cosine, multistep)");
}

std::string_view to_string(LossKind k) { return k == LossKind::l1 ? "l1" : "ml"; }

LossKind parse_loss(std::string_view s) {
  if (s == "l1") return LossKind::l1;
  if (s == "ml") return LossKind::ml;
  throw ConfigError("unknown loss '" + std::string(s) + "' (l1, ml)");
}

std::string_view to_string(Space s) { return s == Space::pixel ? "pixel" : "latent"; }

Space parse_space(std::string_view s) {
  if (s == "pixel") return Space::pixel;
  if (s == "latent") return Space::latent;
  throw ConfigError("unknown space '" + std::string(s) + "' (pixel, latent)");
}

// ---- optimizers ----

void OptimizerSpec::validate() const {
  if (!(lr0 > 0.0) || !(lr_min > 0.0) || lr_min > lr0) {
    throw ConfigError("optimizer: need 0 < lr_min <= lr0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer: betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be > 0");
  if (total_steps < 1) throw ConfigError("optimizer: total_steps must be >= 1");
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw ConfigError("optimizer: milestones must be ascending");
  }
  if (!(gamma > 0.0)) throw ConfigError("optimizer: gamma must be > 0");
}

double OptimizerSpec::lr_at(int step) const {
  if (scheduler == LrScheduler::cosine) {
    return cosine_lr(std::clamp(step, 0, total_steps), total_steps, lr0, lr_min);
  }
  return multistep_lr(step, milestones, lr0, gamma);
}

namespace {

void check_sizes(std::size_t n, std::initializer_list<std::size_t> others) {
  for (std::size_t o : others) {
    if (o != n) throw std::invalid_argument("optimizer step: size mismatch");
  }
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

void lion_step(std::span<double> p, std::span<const double> g, std::span<double> m, double lr,
               double beta1, double beta2, double weight_decay) {
  check_sizes(p.size(), {g.size(), m.size()});
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = beta1 * m[i] + (1.0 - beta1) * g[i];
    p[i] -= lr * (sign(c) + weight_decay * p[i]);
    m[i] = beta2 * m[i] + (1.0 - beta2) * g[i];
  }
}

namespace {

void adam_core(std::span<double> p, std::span<const double> g, std::span<double> m,
               std::span<double> v, int t, double lr, double beta1, double beta2, double l2,
               double eps) {
  check_sizes(p.size(), {g.size(), m.size(), v.size()});
  if (t < 1) throw std::invalid_argument("adam step counter starts at 1");
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i] + l2 * p[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace

void adam_step(std::span<double> p, std::span<const double> g, std::span<double> m,
               std::span<double> v, int t, double lr, double beta1, double beta2,
               double weight_decay, double eps) {
  adam_core(p, g, m, v, t, lr, beta1, beta2, weight_decay, eps);
}

void adamw_step(std::span<double> p, std::span<const double> g, std::span<double> m,
                std::span<double> v, int t, double lr, double beta1, double beta2,
                double weight_decay, double eps) {
  for (double& x : p) x *= 1.0 - lr * weight_decay;
  adam_core(p, g, m, v, t, lr, beta1, beta2, 0.0, eps);
}

Optimizer::Optimizer(const OptimizerSpec& spec, nn::ParamList params)
    : spec_(spec), params_(std::move(params)) {
  spec_.validate();
  for (const nn::Param* p : params_) {
    m_.push_back(Tensor::like(p->value));
    if (spec_.family != OptimizerFamily::lion) v_.push_back(Tensor::like(p->value));
  }
}

void Optimizer::step(int step) {
  for (const nn::Param* p : params_) {
    if (!p->grad.all_finite()) {
      throw Divergence("non-finite gradient in " + p->name + " at step " + std::to_string(step));
    }
  }
  ++t_;
  const double lr = spec_.lr_at(step);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nn::Param& p = *params_[i];
    switch (spec_.family) {
      case OptimizerFamily::lion:
        lion_step(p.value.values(), p.grad.values(), m_[i].values(), lr, spec_.beta1, spec_.beta2,
                  spec_.weight_decay);
        break;
      case OptimizerFamily::adam:
        adam_step(p.value.values(), p.grad.values(), m_[i].values(), v_[i].values(), t_, lr,
                  spec_.beta1, spec_.beta2, spec_.weight_decay, spec_.eps);
        break;
      case OptimizerFamily::adamw:
        adamw_step(p.value.values(), p.grad.values(), m_[i].values(), v_[i].values(), t_, lr,
                   spec_.beta1, spec_.beta2, spec_.weight_decay, spec_.eps);
        break;
    }
  }
}

// ---- losses ----

double noise_matching_loss(const Tensor& eps_hat, const Tensor& eps) {
  return latent::l1_loss(eps_hat, eps);
}

Tensor optimal_previous_state(const Tensor& x_t, const Tensor& x0, const Tensor& mu,
                              std::span<const int> steps, const sde::Schedule& sched) {
  require_same_shape(x_t, x0, "optimal_previous_state");
  require_same_shape(x_t, mu, "optimal_previous_state");
  const Shape& s = x_t.shape();
  if (static_cast<int>(steps.size()) != s.n) throw std::invalid_argument("one step per sample");
  Tensor out(s);
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  for (int n = 0; n < s.n; ++n) {
    const int t = steps[static_cast<std::size_t>(n)];
    if (t < 1 || t > sched.steps) throw std::invalid_argument("optimal_previous_state: bad step");
    const double tb = sched.theta_bar[static_cast<std::size_t>(t)];
    const double tb_prev = sched.theta_bar[static_cast<std::size_t>(t - 1)];
    const double dtb = tb - tb_prev;
    const double denom = std::max(-std::expm1(-2.0 * tb), sde::kVarianceFloor);
    const double a = -std::expm1(-2.0 * tb_prev) * std::exp(-dtb) / denom;
    const double b = -std::expm1(-2.0 * dtb) * std::exp(-tb_prev) / denom;
    const double* xt = x_t.sample(n);
    const double* x0p = x0.sample(n);
    const double* m = mu.sample(n);
    double* o = out.sample(n);
    for (std::size_t i = 0; i < per; ++i) o[i] = m[i] + a * (xt[i] - m[i]) + b * (x0p[i] - m[i]);
  }
  return out;
}

LossEval evaluate_loss(LossKind kind, const Tensor& eps_hat, const Tensor& eps, const Tensor& x_t,
                       const Tensor& x0, const Tensor& mu, std::span<const int> steps,
                       const sde::Schedule& sched) {
  LossEval r;
  if (kind == LossKind::l1) {
    r.value = latent::l1_loss(eps_hat, eps, &r.grad);
    return r;
  }
  const Tensor target = optimal_previous_state(x_t, x0, mu, steps, sched);
  const Shape& s = x_t.shape();
  Tensor pred(s);
  std::vector<double> dpred(static_cast<std::size_t>(s.n));
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  for (int n = 0; n < s.n; ++n) {
    const int t = steps[static_cast<std::size_t>(n)];
    const double theta = sched.theta[static_cast<std::size_t>(t - 1)];
    const double sigma2 = sched.sigma2[static_cast<std::size_t>(t - 1)];
    const double sv = std::sqrt(std::max(sched.variance(t), sde::kVarianceFloor));
    dpred[static_cast<std::size_t>(n)] = -sigma2 * sched.dt / sv;
    const double* xt = x_t.sample(n);
    const double* m = mu.sample(n);
    const double* e = eps_hat.sample(n);
    double* p = pred.sample(n);
    for (std::size_t i = 0; i < per; ++i) {
      p[i] = xt[i] - theta * (m[i] - xt[i]) * sched.dt - sigma2 * e[i] / sv * sched.dt;
    }
  }
  Tensor g;
  r.value = latent::l1_loss(pred, target, &g);
  for (int n = 0; n < s.n; ++n) {
    double* gp = g.sample(n);
    for (std::size_t i = 0; i < per; ++i) gp[i] *= dpred[static_cast<std::size_t>(n)];
  }
  r.grad = std::move(g);
  return r;
}

// ---- training ----

void TrainConfig::validate(int net_stride) const {
  if (!(noise_level > 0.0)) throw ConfigError("noise_level must be > 0");
  if (steps_T < 1) throw ConfigError("steps must be >= 1");
  if (patch < 1 || patch % net_stride != 0) {
    throw ConfigError("patch " + std::to_string(patch) + " is not a multiple of the network stride " +
                      std::to_string(net_stride));
  }
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (val_every < 1) throw ConfigError("val_every must be >= 1");
  if (val_steps < 1) throw ConfigError("val_steps must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_path.empty()) {
    throw ConfigError("checkpoint_every needs a checkpoint path");
  }
  optimizer.validate();
}

sde::Schedule TrainConfig::schedule() const {
  try {
    return sde::default_schedule(steps_T, noise_level / 255.0, theta_bar);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

sde::Schedule TrainConfig::validation_schedule() const {
  try {
    return sde::default_schedule(val_steps, noise_level / 255.0, theta_bar);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

io::Config TrainConfig::to_config() const {
  io::Config c;
  auto real = [&](const std::string& k, double v) { c.set(k, io::format_double(v)); };
  real("sde.noise_level", noise_level);
  c.set("sde.steps", std::to_string(steps_T));
  real("sde.theta_bar", theta_bar);
  c.set("data.patch", std::to_string(patch));
  c.set("train.batch", std::to_string(batch));
  c.set("train.iterations", std::to_string(iterations));
  c.set("train.optimizer", std::string(to_string(optimizer.family)));
  real("train.lr", optimizer.lr0);
  real("train.lr_min", optimizer.lr_min);
  real("train.beta1", optimizer.beta1);
  real("train.beta2", optimizer.beta2);
  real("train.weight_decay", optimizer.weight_decay);
  real("train.eps", optimizer.eps);
  c.set("train.scheduler", std::string(to_string(optimizer.scheduler)));
  c.set("train.milestones", join_ints(optimizer.milestones));
  real("train.gamma", optimizer.gamma);
  c.set("train.space", std::string(to_string(space)));
  c.set("train.loss", std::string(to_string(loss)));
  c.set("train.seed", std::to_string(seed));
  c.set("train.val_every", std::to_string(val_every));
  c.set("train.val_steps", std::to_string(val_steps));
  c.set("train.val_seed", std::to_string(val_seed));
  c.set("train.checkpoint_every", std::to_string(checkpoint_every));
  return c;
}

TrainConfig TrainConfig::from_config(const io::Config& c) {
  TrainConfig t;
  auto get = [&](const char* k, auto& dst, auto reader) {
    if (c.has(k)) dst = (c.*reader)(k);
  };
  get("sde.noise_level", t.noise_level, &io::Config::real);
  get("sde.steps", t.steps_T, &io::Config::integer);
  get("sde.theta_bar", t.theta_bar, &io::Config::real);
  get("data.patch", t.patch, &io::Config::integer);
  get("train.batch", t.batch, &io::Config::integer);
  get("train.iterations", t.iterations, &io::Config::integer);
  if (c.has("train.optimizer")) t.optimizer.family = parse_family(c.str("train.optimizer"));
  get("train.lr", t.optimizer.lr0, &io::Config::real);
  get("train.lr_min", t.optimizer.lr_min, &io::Config::real);
  get("train.beta1", t.optimizer.beta1, &io::Config::real);
  get("train.beta2", t.optimizer.beta2, &io::Config::real);
  get("train.weight_decay", t.optimizer.weight_decay, &io::Config::real);
  get("train.eps", t.optimizer.eps, &io::Config::real);
  if (c.has("train.scheduler")) t.optimizer.scheduler = parse_scheduler(c.str("train.scheduler"));
  get("train.milestones", t.optimizer.milestones, &io::Config::int_list);
  get("train.gamma", t.optimizer.gamma, &io::Config::real);
  if (c.has("train.space")) t.space = parse_space(c.str("train.space"));
  if (c.has("train.loss")) t.loss = parse_loss(c.str("train.loss"));
  get("train.seed", t.seed, &io::Config::u64);
  get("train.val_every", t.val_every, &io::Config::integer);
  get("train.val_steps", t.val_steps, &io::Config::integer);
  get("train.val_seed", t.val_seed, &io::Config::u64);
  get("train.checkpoint_every", t.checkpoint_every, &io::Config::integer);
  t.optimizer.total_steps = std::max(1, t.iterations);
  return t;
}

namespace {

Tensor gather(const Tensor& src, std::span<const int> idx) {
  const Shape& s = src.shape();
  Tensor out({static_cast<int>(idx.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < idx.size(); ++i) out.set_sample(static_cast<int>(i), src, idx[i]);
  return out;
}

double mean_image_psnr(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (int n = 0; n < a.shape().n; ++n) acc += metrics::psnr(a.batch_slice(n, 1), b.batch_slice(n, 1));
  return acc / a.shape().n;
}

constexpr int kValChunk = 8;

}  // namespace

double baseline_psnr(const PairData& val) { return mean_image_psnr(val.lq, val.hq); }

sde::NoisePredictor mapped_predictor(nn::NoiseNetwork& net, int train_T,
                                     const sde::Schedule& sched) {
  if (train_T < 1) throw std::invalid_argument("mapped_predictor: train_T must be >= 1");
  const int steps = sched.steps;
  return [&net, train_T, steps](const Tensor& x, const Tensor& mu, int s) {
    const int t = static_cast<int>(std::lround(static_cast<double>(s) * train_T / steps));
    return net.predict(x, mu, std::clamp(t, 1, train_T));
  };
}

double validate(nn::NoiseNetwork& net, const PairData& val, const sde::Schedule& sched,
                int train_T, std::uint64_t seed, latent::LatentUNet* unet) {
  const int n = val.size();
  if (n == 0) throw std::invalid_argument("validate: empty validation set");
  const sde::NoisePredictor predict = mapped_predictor(net, train_T, sched);
  Tensor restored(val.lq.shape());
  for (int first = 0, chunk = 0; first < n; first += kValChunk, ++chunk) {
    const int count = std::min(kValChunk, n - first);
    const Tensor lq = val.lq.batch_slice(first, count);
    const std::uint64_t chunk_seed = seed + static_cast<std::uint64_t>(chunk);
    const Tensor out = unet ? latent::latent_restore(lq, *unet, predict, sched, chunk_seed)
                            : sde::restore(lq, predict, sched, chunk_seed);
    for (int i = 0; i < count; ++i) restored.set_sample(first + i, out, i);
  }
  return mean_image_psnr(restored, val.hq);
}

Tensor encode_latents(latent::LatentUNet& unet, const Tensor& images, int chunk) {
  const int n = images.shape().n;
  Tensor out;
  for (int first = 0; first < n; first += chunk) {
    const int count = std::min(chunk, n - first);
    const Tensor z = unet.encode(images.batch_slice(first, count)).latent;
    if (out.empty()) out = Tensor({n, z.shape().c, z.shape().h, z.shape().w});
    for (int i = 0; i < count; ++i) out.set_sample(first + i, z, i);
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const PairData& data, const PairData& val,
                  nn::NoiseNetwork& net, latent::LatentUNet* unet, const TrainHooks& hooks) {
  const nn::NoiseNetConfig& ncfg = net.config();
  const int data_stride = cfg.space == Space::latent && unet
                              ? ncfg.stride() * unet->config().down_factor
                              : ncfg.stride();
  cfg.validate(data_stride);
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  require_same_shape(data.lq, data.hq, "train data");
  if (data.lq.shape().h != cfg.patch || data.lq.shape().w != cfg.patch) {
    throw ConfigError("train: dataset patches are " + data.lq.shape().str() + ", config patch is " +
                      std::to_string(cfg.patch));
  }
  if (cfg.space == Space::latent && unet == nullptr) {
    throw ConfigError("latent-space training needs a pretrained U-Net");
  }
  const sde::Schedule sched = cfg.schedule();
  const sde::Schedule val_sched = cfg.validation_schedule();

  Tensor x0_all, mu_all;
  if (cfg.space == Space::latent) {
    x0_all = encode_latents(*unet, data.hq);
    mu_all = encode_latents(*unet, data.lq);
  } else {
    x0_all = data.hq;
    mu_all = data.lq;
  }
  if (x0_all.shape().c != ncfg.image_channels) {
    throw ConfigError("noise network expects " + std::to_string(ncfg.image_channels) +
                      " channels, training data has " + std::to_string(x0_all.shape().c));
  }

  OptimizerSpec ospec = cfg.optimizer;
  ospec.total_steps = std::max(1, cfg.iterations);
  const nn::ParamList params = net.params();
  Optimizer opt(ospec, params);
  latent::LatentUNet* val_unet = cfg.space == Space::latent ? unet : nullptr;

  TrainResult result;
  if (val.size() > 0) result.baseline_psnr = baseline_psnr(val);
  EpochSampler sampler(cfg.seed, data.size());
  const nlohmann::json ck_extra = {{"space", std::string(to_string(cfg.space))}};
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(it));
    const std::vector<int> idx = sampler.batch(it, cfg.batch);
    std::vector<int> steps(static_cast<std::size_t>(cfg.batch));
    for (int& s : steps) s = rng.uniform_int(1, cfg.steps_T);
    const Tensor x0 = gather(x0_all, idx);
    const Tensor mu = gather(mu_all, idx);
    const Tensor eps = normal_like(x0.shape(), rng);
    Tensor x_t(x0.shape());
    for (int b = 0; b < cfg.batch; ++b) {
      x_t.set_sample(b, sde::forward_sample(x0.batch_slice(b, 1), mu.batch_slice(b, 1),
                                            steps[static_cast<std::size_t>(b)],
                                            eps.batch_slice(b, 1), sched));
    }
    const Tensor eps_hat = net.forward(x_t, mu, steps);
    const LossEval loss = evaluate_loss(cfg.loss, eps_hat, eps, x_t, x0, mu, steps, sched);
    if (!std::isfinite(loss.value)) {
      throw Divergence("non-finite training loss at iteration " + std::to_string(it + 1));
    }
    nn::zero_grad(params);
    net.backward(loss.grad);
    opt.step(it);

    HistoryRow row{it + 1, loss.value, ospec.lr_at(it)};
    if (val.size() > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.iterations)) {
      row.val_psnr = validate(net, val, val_sched, cfg.steps_T, cfg.val_seed, val_unet);
      if (!std::isfinite(row.val_psnr)) {
        throw Divergence("non-finite validation PSNR at iteration " + std::to_string(it + 1));
      }
      result.final_val_psnr = row.val_psnr;
    }
    if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
      nlohmann::json extra = ck_extra;
      extra["iteration"] = it + 1;
      nn::save_noise_checkpoint(cfg.checkpoint_path, net, sched, extra);
    }
    result.history.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
  }
  return result;
}

// ---- batch sampling ----

EpochSampler::EpochSampler(std::uint64_t seed, int n) : seed_(seed), n_(n) {
  if (n < 1) throw std::invalid_argument("EpochSampler: empty dataset");
}

int EpochSampler::at(std::int64_t position) {
  const std::int64_t epoch = position / n_;
  if (epoch != epoch_) {
    order_.resize(static_cast<std::size_t>(n_));
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng = Rng::stream(seed_ ^ 0x5851F42D4C957F2DULL, static_cast<std::uint64_t>(epoch));
    for (int i = n_ - 1; i > 0; --i) {
      std::swap(order_[static_cast<std::size_t>(i)],
                order_[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    }
    epoch_ = epoch;
  }
  return order_[static_cast<std::size_t>(position % n_)];
}

std::vector<int> EpochSampler::batch(int iteration, int batch) {
  std::vector<int> idx(static_cast<std::size_t>(batch));
  const std::int64_t first = static_cast<std::int64_t>(iteration) * batch;
  for (int b = 0; b < batch; ++b) idx[static_cast<std::size_t>(b)] = at(first + b);
  return idx;
}

// ---- U-Net pretraining ----

std::vector<UNetHistoryRow> pretrain_unet(const UNetTrainConfig& cfg, const PairData& data,
                                          latent::LatentUNet& net) {
  if (data.size() == 0) throw std::invalid_argument("pretrain_unet: empty dataset");
  if (cfg.batch < 1 || cfg.iterations < 0) throw ConfigError("pretrain_unet: bad batch/iterations");
  OptimizerSpec ospec = cfg.optimizer;
  ospec.total_steps = std::max(1, cfg.iterations);
  const nn::ParamList params = net.params();
  Optimizer opt(ospec, params);
  latent::LatentUNet replica(net.config(), 0);
  std::vector<UNetHistoryRow> history;
  EpochSampler sampler(cfg.seed, data.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    const std::vector<int> idx = sampler.batch(it, cfg.batch);
    nn::zero_grad(params);
    const auto losses =
        latent::latent_replace_grads(net, replica, gather(data.lq, idx), gather(data.hq, idx));
    opt.step(it);
    history.push_back({it + 1, losses.loss_lq, losses.loss_hq, ospec.lr_at(it)});
  }
  return history;
}

double reconstruction_psnr(latent::LatentUNet& net, const Tensor& images, int chunk) {
  const int n = images.shape().n;
  double acc = 0.0;
  for (int first = 0; first < n; first += chunk) {
    const int count = std::min(chunk, n - first);
    const Tensor x = images.batch_slice(first, count);
    const Tensor y = net.decode(net.encode(x), true);
    for (int i = 0; i < count; ++i) acc += metrics::psnr(y.batch_slice(i, 1), x.batch_slice(i, 1));
  }
  return acc / n;
}

std::vector<double> moving_average(std::span<const double> values, int window) {
  if (window < 1) throw std::invalid_argument("moving_average: window must be >= 1");
  std::vector<double> out(values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) acc -= values[i - static_cast<std::size_t>(window)];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

// ---- ablation ----

std::string_view to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::noise_level: return "noise_level";
    case AblationAxis::steps: return "steps";
    case AblationAxis::patch: return "patch";
    case AblationAxis::optimizer: return "optimizer";
  }
  return "noise_level";
}

AblationAxis parse_axis(std::string_view s) {
  if (s == "noise_level") return AblationAxis::noise_level;
  if (s == "steps") return AblationAxis::steps;
  if (s == "patch") return AblationAxis::patch;
  if (s == "optimizer") return AblationAxis::optimizer;
  throw ConfigError("unknown ablation axis '" + std::string(s) +
                    "' (noise_level, steps, patch, optimizer)");
}

std::vector<std::string> default_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::noise_level: return {"10", "30", "50", "70"};
    case AblationAxis::steps: return {"100", "1000"};
    case AblationAxis::patch: return {"128", "256"};
    case AblationAxis::optimizer: return {"adam+multistep", "adamw+cosine", "lion+cosine"};
  }
  return {};
}

namespace {

double parse_real(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("'" + s + "' is not a number");
  return v;
}

int parse_int(const std::string& s) {
  const double v = parse_real(s);
  if (v != std::floor(v)) throw ConfigError("'" + s + "' is not an integer");
  return static_cast<int>(v);
}

}  // namespace

TrainConfig apply_axis(const TrainConfig& base, AblationAxis axis, const std::string& value) {
  TrainConfig cfg = base;
  switch (axis) {
    case AblationAxis::noise_level: cfg.noise_level = parse_real(value); break;
    case AblationAxis::steps: cfg.steps_T = parse_int(value); break;
    case AblationAxis::patch: cfg.patch = parse_int(value); break;
    case AblationAxis::optimizer: {
      std::string spec = value;
      if (const auto at = spec.find('@'); at != std::string::npos) {
        cfg.optimizer.lr0 = parse_real(spec.substr(at + 1));
        spec = spec.substr(0, at);
      }
      const auto plus = spec.find('+');
      if (plus == std::string::npos) {
        throw ConfigError("optimizer value '" + value + "' must read family+scheduler");
      }
      cfg.optimizer.family = parse_family(spec.substr(0, plus));
      cfg.optimizer.scheduler = parse_scheduler(spec.substr(plus + 1));
      if (cfg.optimizer.scheduler == LrScheduler::multistep && cfg.optimizer.milestones.empty()) {
        cfg.optimizer.milestones = {cfg.iterations / 2, (3 * cfg.iterations) / 4};
      }
      break;
    }
  }
  return cfg;
}

AblationResult ablate(AblationAxis axis, const std::vector<std::string>& values,
                      const TrainConfig& base, const nn::NoiseNetConfig& net_cfg,
                      std::uint64_t net_seed, const DataProvider& data) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  AblationResult out;
  out.axis = axis;
  const auto base_entries = base.to_config().entries();
  for (const std::string& value : values) {
    AblationCell cell;
    cell.value = value;
    try {
      cell.cfg = apply_axis(base, axis, value);
      const auto cell_entries = cell.cfg.to_config().entries();
      for (const auto& [k, v] : cell_entries) {
        const auto it = base_entries.find(k);
        if (it == base_entries.end() || it->second != v) {
          cell.config_diff.push_back(k + ": " + (it == base_entries.end() ? "" : it->second) + " -> " + v);
        }
      }
      auto net = nn::make_noise_network(net_cfg, net_seed);
      const auto [train_set, val_set] = data(cell.cfg);
      cell.result = train(cell.cfg, train_set, val_set, *net);
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    out.cells.push_back(std::move(cell));
  }
  return out;
}

namespace {

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

}  // namespace

namespace {

/// Steps without a validation pass get an empty cell.
std::string optional_cell(double v) { return std::isnan(v) ? std::string() : io::format_double(v); }

}  // namespace

std::vector<std::filesystem::path> write_ablation(const AblationResult& r,
                                                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string axis(to_string(r.axis));
  io::CsvTable table({"axis", "value", "status", "iterations", "baseline_psnr", "final_val_psnr",
                      "best_val_psnr", "final_loss", "color", "config_diff", "error"});
  io::CsvTable curves({"value", "step", "loss", "lr", "val_psnr"});
  std::vector<io::PlotSeries> series;
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    const AblationCell& c = r.cells[i];
    double best = std::numeric_limits<double>::quiet_NaN();
    io::PlotSeries s{c.value, {}, {}};
    for (const HistoryRow& h : c.result.history) {
      curves.add_row({c.value, std::to_string(h.step), io::format_double(h.loss),
                      io::format_double(h.lr), optional_cell(h.val_psnr)});
      if (std::isfinite(h.val_psnr)) {
        best = std::isnan(best) ? h.val_psnr : std::max(best, h.val_psnr);
        s.x.push_back(h.step);
        s.y.push_back(h.val_psnr);
      }
    }
    const double final_loss =
        c.result.history.empty() ? std::numeric_limits<double>::quiet_NaN() : c.result.history.back().loss;
    table.add_row({axis, c.value, c.failed ? "failed" : "ok", std::to_string(c.result.history.size()),
                   io::format_double(c.result.baseline_psnr), io::format_double(c.result.final_val_psnr),
                   io::format_double(best), io::format_double(final_loss), io::plot_color(i),
                   join(c.config_diff, "; "), c.error});
    series.push_back(std::move(s));
  }
  const auto table_path = dir / ("ablation_" + axis + ".csv");
  const auto curves_path = dir / ("ablation_" + axis + "_curves.csv");
  const auto plot_path = dir / ("ablation_" + axis + ".png");
  table.write(table_path);
  curves.write(curves_path);
  io::write_line_plot(plot_path, series);
  return {table_path, curves_path, plot_path};
}

std::vector<std::filesystem::path> write_history(const TrainResult& r,
                                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::CsvTable t({"step", "loss", "lr", "val_psnr"});
  io::PlotSeries loss{"loss", {}, {}}, psnr{"val_psnr", {}, {}}, base{"lq_baseline", {}, {}};
  std::vector<double> losses;
  for (const auto& h : r.history) losses.push_back(h.loss);
  const auto smooth = moving_average(losses, 100);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& h = r.history[i];
    t.add_row({std::to_string(h.step), io::format_double(h.loss), io::format_double(h.lr),
               optional_cell(h.val_psnr)});
    loss.x.push_back(h.step);
    loss.y.push_back(smooth[i]);
    if (std::isfinite(h.val_psnr)) {
      psnr.x.push_back(h.step);
      psnr.y.push_back(h.val_psnr);
      base.x.push_back(h.step);
      base.y.push_back(r.baseline_psnr);
    }
  }
  const auto csv = dir / "history.csv";
  const auto loss_png = dir / "loss.png";
  const auto psnr_png = dir / "val_psnr.png";
  t.write(csv);
  io::write_line_plot(loss_png, {loss});
  io::write_line_plot(psnr_png, {psnr, base});
  return {csv, loss_png, psnr_png};
}

}  // namespace refusion::train
