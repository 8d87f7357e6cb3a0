// SPDX-License-Identifier: Apache-2.0
#include "refusion/nn/noise_net.hpp"

#include <algorithm>
#include <stdexcept>

namespace refusion::nn {

std::string_view to_string(Backbone b) { return b == Backbone::nafnet ? "nafnet" : "unet"; }

Backbone parse_backbone(std::string_view s) {
  if (s == "nafnet") return Backbone::nafnet;
  if (s == "unet") return Backbone::unet;
  throw std::invalid_argument("unknown backbone '" + std::string(s) + "'");
}

void NoiseNetConfig::validate() const {
  if (image_channels < 1) throw std::invalid_argument("image_channels must be >= 1");
  if (width < 2 || width % 2 != 0) throw std::invalid_argument("width must be even and >= 2");
  if (enc_blocks.empty()) throw std::invalid_argument("need at least one encoder stage");
  if (enc_blocks.size() != dec_blocks.size()) {
    throw std::invalid_argument("enc_blocks and dec_blocks must have equal length");
  }
  auto positive = [](int v) { return v >= 1; };
  if (!std::all_of(enc_blocks.begin(), enc_blocks.end(), positive) ||
      !std::all_of(dec_blocks.begin(), dec_blocks.end(), positive) || mid_blocks < 1) {
    throw std::invalid_argument("block counts must all be >= 1");
  }
  if (time_dim < 4 || time_dim % 4 != 0) {
    throw std::invalid_argument("time_dim must be a positive multiple of 4");
  }
}

void check_spatial(const Shape& s, int stride, const char* what) {
  if (s.h % stride == 0 && s.w % stride == 0) return;
  const int ph = (stride - s.h % stride) % stride;
  const int pw = (stride - s.w % stride) % stride;
  throw std::invalid_argument(std::string(what) + ": spatial size " + std::to_string(s.h) + "x" +
                              std::to_string(s.w) + " is not a multiple of " +
                              std::to_string(stride) + "; pad by " + std::to_string(ph) +
                              " rows and " + std::to_string(pw) + " columns");
}

Tensor NoiseNetwork::predict(const Tensor& x_t, const Tensor& mu, int step) {
  const std::vector<int> steps(static_cast<std::size_t>(x_t.shape().n), step);
  return forward(x_t, mu, steps);
}

std::size_t NoiseNetwork::param_count() { return count_params(params()); }

// --------------------------------------------------------------- TimeMlp

TimeMlp::TimeMlp(const std::string& name, int dim)
    : dim_(dim), fc1_(name + ".fc1", dim, 2 * dim), fc2_(name + ".fc2", dim, dim) {}

Tensor TimeMlp::base(std::span<const int> steps) const {
  Tensor out({static_cast<int>(steps.size()), dim_, 1, 1});
  for (std::size_t n = 0; n < steps.size(); ++n) {
    const auto e = sinusoidal_embedding(steps[n], dim_);
    std::copy(e.begin(), e.end(), out.sample(static_cast<int>(n)));
  }
  return out;
}

Tensor TimeMlp::forward(std::span<const int> steps) {
  return fc2_.forward(gate_.forward(fc1_.forward(base(steps))));
}

void TimeMlp::backward(const Tensor& grad_out) {
  fc1_.backward(gate_.backward(fc2_.backward(grad_out)));
}

void TimeMlp::init(Rng& rng) {
  fc1_.init(rng);
  fc2_.init(rng);
}

void TimeMlp::collect(ParamList& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

// -------------------------------------------------------------- NafBlock

NafBlock::NafBlock(const std::string& name, int channels, int time_dim)
    : norm1(name + ".norm1", channels),
      norm2(name + ".norm2", channels),
      conv1(name + ".conv1", channels, 2 * channels, 1, 1, 0),
      conv3(name + ".conv3", channels, channels, 1, 1, 0),
      conv4(name + ".conv4", channels, 2 * channels, 1, 1, 0),
      conv5(name + ".conv5", channels, channels, 1, 1, 0),
      dwconv(name + ".dwconv", 2 * channels),
      sca(name + ".sca", channels),
      channels_(channels),
      time_dim_(time_dim) {
  if (time_dim > 0) time_proj = Linear(name + ".time_proj", time_dim / 2, 4 * channels);
}

void NafBlock::init(Rng& rng) {
  conv1.init(rng);
  dwconv.init(rng);
  sca.init(rng);
  conv3.init(rng);
  conv4.init(rng);
  conv5.init(rng);
  if (time_dim_ > 0) time_proj.init(rng);
}

void NafBlock::collect(ParamList& out) {
  norm1.collect(out);
  conv1.collect(out);
  dwconv.collect(out);
  sca.collect(out);
  conv3.collect(out);
  norm2.collect(out);
  conv4.collect(out);
  conv5.collect(out);
  if (time_dim_ > 0) time_proj.collect(out);
}

std::uint64_t NafBlock::macs(int h, int w) const {
  std::uint64_t m = conv1.macs(h, w) + dwconv.macs(h, w) + sca.macs(h, w) + conv3.macs(h, w) +
                    conv4.macs(h, w) + conv5.macs(h, w);
  if (time_dim_ > 0) m += time_proj.macs();
  return m;
}

Tensor NafBlock::forward(const Tensor& x, const Tensor* temb) {
  used_time_ = temb != nullptr && time_dim_ > 0;
  Tensor h = norm1.forward(x);
  if (used_time_) {
    cond_ = time_proj.forward(time_gate_.forward(*temb));
    h = mod1_.forward(h, cond_, 0, 1);
  }
  h = conv3.forward(sca.forward(gate1_.forward(dwconv.forward(conv1.forward(h)))));
  Tensor y = x;
  y += h;
  h = norm2.forward(y);
  if (used_time_) h = mod2_.forward(h, cond_, 2, 3);
  h = conv5.forward(gate2_.forward(conv4.forward(h)));
  y += h;
  return y;
}

Tensor NafBlock::backward(const Tensor& grad_out, Tensor* grad_temb) {
  Tensor gcond;
  if (used_time_) gcond = Tensor::like(cond_);

  Tensor g = conv4.backward(gate2_.backward(conv5.backward(grad_out)));
  if (used_time_) g = mod2_.backward(g, gcond);
  Tensor gy = norm2.backward(g);
  gy += grad_out;

  g = conv1.backward(dwconv.backward(gate1_.backward(sca.backward(conv3.backward(gy)))));
  if (used_time_) g = mod1_.backward(g, gcond);
  Tensor gx = norm1.backward(g);
  gx += gy;

  if (used_time_ && grad_temb != nullptr) {
    *grad_temb += time_gate_.backward(time_proj.backward(gcond));
  }
  return gx;
}

// ---------------------------------------------------------------- NafNet

NafNet::NafNet(const NoiseNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg),
      time_mlp_("time", cfg.time_dim),
      intro_("intro", cfg.in_channels(), cfg.width, 3, 1, 1),
      ending_("ending", cfg.width, cfg.image_channels, 3, 1, 1) {
  cfg_.validate();
  const int levels = cfg_.stages();
  int ch = cfg_.width;
  for (int l = 0; l < levels; ++l) {
    std::vector<NafBlock> stage;
    for (int b = 0; b < cfg_.enc_blocks[static_cast<std::size_t>(l)]; ++b) {
      stage.emplace_back("enc" + std::to_string(l) + "." + std::to_string(b), ch, cfg_.time_dim);
    }
    encoders_.push_back(std::move(stage));
    downs_.emplace_back("down" + std::to_string(l), ch, 2 * ch, 2, 2, 0);
    ch *= 2;
  }
  for (int b = 0; b < cfg_.mid_blocks; ++b) {
    middle_.emplace_back("mid." + std::to_string(b), ch, cfg_.time_dim);
  }
  decoders_.resize(static_cast<std::size_t>(levels));
  for (int l = levels - 1; l >= 0; --l) {
    const int lch = cfg_.width << l;
    ups_.emplace_back("up" + std::to_string(l), 2 * lch, 4 * lch, 1, 1, 0, false);
    const int nblocks = cfg_.dec_blocks[static_cast<std::size_t>(levels - 1 - l)];
    for (int b = 0; b < nblocks; ++b) {
      decoders_[static_cast<std::size_t>(l)].emplace_back(
          "dec" + std::to_string(l) + "." + std::to_string(b), lch, cfg_.time_dim);
    }
  }
  // ups_ was filled deepest-first; index it by level.
  std::reverse(ups_.begin(), ups_.end());

  Rng rng(init_seed);
  time_mlp_.init(rng);
  intro_.init(rng);
  for (auto& stage : encoders_) {
    for (auto& b : stage) b.init(rng);
  }
  for (auto& d : downs_) d.init(rng);
  for (auto& b : middle_) b.init(rng);
  for (auto& u : ups_) u.init(rng);
  for (auto& stage : decoders_) {
    for (auto& b : stage) b.init(rng);
  }
  ending_.init(rng);
}

std::vector<NafBlock*> NafNet::blocks() {
  std::vector<NafBlock*> out;
  for (auto& stage : encoders_) {
    for (auto& b : stage) out.push_back(&b);
  }
  for (auto& b : middle_) out.push_back(&b);
  for (int l = cfg_.stages() - 1; l >= 0; --l) {
    for (auto& b : decoders_[static_cast<std::size_t>(l)]) out.push_back(&b);
  }
  return out;
}

ParamList NafNet::params() {
  ParamList out;
  time_mlp_.collect(out);
  intro_.collect(out);
  for (int l = 0; l < cfg_.stages(); ++l) {
    for (auto& b : encoders_[static_cast<std::size_t>(l)]) b.collect(out);
    downs_[static_cast<std::size_t>(l)].collect(out);
  }
  for (auto& b : middle_) b.collect(out);
  for (int l = cfg_.stages() - 1; l >= 0; --l) {
    ups_[static_cast<std::size_t>(l)].collect(out);
    for (auto& b : decoders_[static_cast<std::size_t>(l)]) b.collect(out);
  }
  ending_.collect(out);
  return out;
}

std::uint64_t NafNet::macs(int h, int w) const {
  std::uint64_t m = time_mlp_.macs() + intro_.macs(h, w) + ending_.macs(h, w);
  const int levels = cfg_.stages();
  for (int l = 0; l < levels; ++l) {
    const int lh = h >> l;
    const int lw = w >> l;
    for (const auto& b : encoders_[static_cast<std::size_t>(l)]) m += b.macs(lh, lw);
    m += downs_[static_cast<std::size_t>(l)].macs(lh, lw);
    m += ups_[static_cast<std::size_t>(l)].macs(lh / 2, lw / 2);
    for (const auto& b : decoders_[static_cast<std::size_t>(l)]) m += b.macs(lh, lw);
  }
  for (const auto& b : middle_) m += b.macs(h >> levels, w >> levels);
  return m;
}

Tensor NafNet::forward(const Tensor& x_t, const Tensor& mu, std::span<const int> steps) {
  require_same_shape(x_t, mu, "predict_noise");
  const Shape& s = x_t.shape();
  if (s.c != cfg_.image_channels) {
    throw std::invalid_argument("predict_noise: expected " + std::to_string(cfg_.image_channels) +
                                " channels, got " + s.str());
  }
  if (static_cast<int>(steps.size()) != s.n) {
    throw std::invalid_argument("predict_noise: one step per sample required");
  }
  check_spatial(s, cfg_.stride(), "predict_noise");

  temb_ = time_mlp_.forward(steps);
  Tensor x = intro_.forward(concat_channels(x_t, mu));
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg_.stages(); ++l) {
    for (auto& b : encoders_[static_cast<std::size_t>(l)]) x = b.forward(x, &temb_);
    skips.push_back(x);
    x = downs_[static_cast<std::size_t>(l)].forward(x);
  }
  for (auto& b : middle_) x = b.forward(x, &temb_);
  for (int l = cfg_.stages() - 1; l >= 0; --l) {
    x = PixelShuffle2::forward(ups_[static_cast<std::size_t>(l)].forward(x));
    x += skips[static_cast<std::size_t>(l)];
    for (auto& b : decoders_[static_cast<std::size_t>(l)]) x = b.forward(x, &temb_);
  }
  return ending_.forward(x);
}

void NafNet::backward(const Tensor& grad_out) {
  Tensor gtemb = Tensor::like(temb_);
  Tensor g = ending_.backward(grad_out);
  const int levels = cfg_.stages();
  std::vector<Tensor> skip_grads(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) {
    auto& stage = decoders_[static_cast<std::size_t>(l)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, &gtemb);
    skip_grads[static_cast<std::size_t>(l)] = g;
    g = ups_[static_cast<std::size_t>(l)].backward(PixelShuffle2::backward(g));
  }
  for (auto it = middle_.rbegin(); it != middle_.rend(); ++it) g = it->backward(g, &gtemb);
  for (int l = levels - 1; l >= 0; --l) {
    g = downs_[static_cast<std::size_t>(l)].backward(g);
    g += skip_grads[static_cast<std::size_t>(l)];
    auto& stage = encoders_[static_cast<std::size_t>(l)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, &gtemb);
  }
  intro_.backward(g);
  time_mlp_.backward(gtemb);
}

// -------------------------------------------------------------- ResBlock

ResBlock::ResBlock(const std::string& name, int in, int out, int time_dim)
    : in_(in),
      out_(out),
      norm1_(name + ".norm1", in),
      norm2_(name + ".norm2", out),
      conv1_(name + ".conv1", in, out, 3, 1, 1),
      conv2_(name + ".conv2", out, out, 3, 1, 1),
      time_proj_(name + ".time_proj", time_dim, 2 * out) {
  if (in != out) skip_ = Conv2d(name + ".skip", in, out, 1, 1, 0);
}

void ResBlock::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  time_proj_.init(rng);
  if (in_ != out_) skip_.init(rng);
}

void ResBlock::collect(ParamList& out) {
  norm1_.collect(out);
  conv1_.collect(out);
  time_proj_.collect(out);
  norm2_.collect(out);
  conv2_.collect(out);
  if (in_ != out_) skip_.collect(out);
}

std::uint64_t ResBlock::macs(int h, int w) const {
  std::uint64_t m = conv1_.macs(h, w) + conv2_.macs(h, w) + time_proj_.macs();
  if (in_ != out_) m += skip_.macs(h, w);
  return m;
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) {
  Tensor h = conv1_.forward(act1_.forward(norm1_.forward(x)));
  cond_ = time_proj_.forward(time_act_.forward(temb));
  h = mod_.forward(h, cond_, 0, 1);
  h = conv2_.forward(act2_.forward(norm2_.forward(h)));
  if (in_ == out_) {
    h += x;
  } else {
    h += skip_.forward(x);
  }
  return h;
}

Tensor ResBlock::backward(const Tensor& grad_out, Tensor& grad_temb) {
  Tensor gcond = Tensor::like(cond_);
  Tensor g = norm2_.backward(act2_.backward(conv2_.backward(grad_out)));
  g = mod_.backward(g, gcond);
  Tensor gx = norm1_.backward(act1_.backward(conv1_.backward(g)));
  if (in_ == out_) {
    gx += grad_out;
  } else {
    gx += skip_.backward(grad_out);
  }
  grad_temb += time_act_.backward(time_proj_.backward(gcond));
  return gx;
}

// ---------------------------------------------------------- UNetBaseline

UNetBaseline::UNetBaseline(const NoiseNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg),
      t_fc1_("time.fc1", cfg.time_dim, cfg.time_dim),
      t_fc2_("time.fc2", cfg.time_dim, cfg.time_dim),
      intro_("intro", cfg.in_channels(), cfg.width, 3, 1, 1),
      ending_("ending", cfg.width, cfg.image_channels, 3, 1, 1) {
  cfg_.validate();
  const int levels = cfg_.stages();
  const int td = cfg_.time_dim;
  int ch = cfg_.width;
  for (int l = 0; l < levels; ++l) {
    std::vector<ResBlock> stage;
    for (int b = 0; b < cfg_.enc_blocks[static_cast<std::size_t>(l)]; ++b) {
      stage.emplace_back("enc" + std::to_string(l) + "." + std::to_string(b), ch, ch, td);
    }
    encoders_.push_back(std::move(stage));
    skip_channels_.push_back(ch);
    downs_.emplace_back("down" + std::to_string(l), ch, 2 * ch, 2, 2, 0);
    ch *= 2;
  }
  for (int b = 0; b < cfg_.mid_blocks; ++b) {
    middle_.emplace_back("mid." + std::to_string(b), ch, ch, td);
  }
  mid_attn_ = SigmoidChannelAttention("mid.attn", ch);
  decoders_.resize(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) {
    const int lch = cfg_.width << l;
    ups_.emplace_back("up" + std::to_string(l), 2 * lch, 4 * lch, 1, 1, 0, false);
    const int nblocks = cfg_.dec_blocks[static_cast<std::size_t>(levels - 1 - l)];
    auto& stage = decoders_[static_cast<std::size_t>(l)];
    for (int b = 0; b < nblocks; ++b) {
      stage.emplace_back("dec" + std::to_string(l) + "." + std::to_string(b),
                         b == 0 ? 2 * lch : lch, lch, td);
    }
  }

  Rng rng(init_seed);
  t_fc1_.init(rng);
  t_fc2_.init(rng);
  intro_.init(rng);
  for (auto& stage : encoders_) {
    for (auto& b : stage) b.init(rng);
  }
  for (auto& d : downs_) d.init(rng);
  for (auto& b : middle_) b.init(rng);
  mid_attn_.init(rng);
  for (auto& u : ups_) u.init(rng);
  for (auto& stage : decoders_) {
    for (auto& b : stage) b.init(rng);
  }
  ending_.init(rng);
}

ParamList UNetBaseline::params() {
  ParamList out;
  t_fc1_.collect(out);
  t_fc2_.collect(out);
  intro_.collect(out);
  for (int l = 0; l < cfg_.stages(); ++l) {
    for (auto& b : encoders_[static_cast<std::size_t>(l)]) b.collect(out);
    downs_[static_cast<std::size_t>(l)].collect(out);
  }
  for (auto& b : middle_) b.collect(out);
  mid_attn_.collect(out);
  for (int l = cfg_.stages() - 1; l >= 0; --l) {
    ups_[static_cast<std::size_t>(l)].collect(out);
    for (auto& b : decoders_[static_cast<std::size_t>(l)]) b.collect(out);
  }
  ending_.collect(out);
  return out;
}

std::uint64_t UNetBaseline::macs(int h, int w) const {
  std::uint64_t m = t_fc1_.macs() + t_fc2_.macs() + intro_.macs(h, w) + ending_.macs(h, w);
  const int levels = cfg_.stages();
  for (int l = 0; l < levels; ++l) {
    const int lh = h >> l;
    const int lw = w >> l;
    for (const auto& b : encoders_[static_cast<std::size_t>(l)]) m += b.macs(lh, lw);
    m += downs_[static_cast<std::size_t>(l)].macs(lh, lw);
    m += ups_[static_cast<std::size_t>(l)].macs(lh / 2, lw / 2);
    for (const auto& b : decoders_[static_cast<std::size_t>(l)]) m += b.macs(lh, lw);
  }
  for (const auto& b : middle_) m += b.macs(h >> levels, w >> levels);
  m += mid_attn_.macs(h >> levels, w >> levels);
  return m;
}

Tensor UNetBaseline::forward(const Tensor& x_t, const Tensor& mu, std::span<const int> steps) {
  require_same_shape(x_t, mu, "unet_baseline_forward");
  const Shape& s = x_t.shape();
  if (s.c != cfg_.image_channels) {
    throw std::invalid_argument("unet_baseline_forward: channel mismatch " + s.str());
  }
  if (static_cast<int>(steps.size()) != s.n) {
    throw std::invalid_argument("unet_baseline_forward: one step per sample required");
  }
  check_spatial(s, cfg_.stride(), "unet_baseline_forward");

  Tensor base({s.n, cfg_.time_dim, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    const auto e = sinusoidal_embedding(steps[static_cast<std::size_t>(n)], cfg_.time_dim);
    std::copy(e.begin(), e.end(), base.sample(n));
  }
  temb_ = t_fc2_.forward(t_act_.forward(t_fc1_.forward(base)));

  Tensor x = intro_.forward(concat_channels(x_t, mu));
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg_.stages(); ++l) {
    for (auto& b : encoders_[static_cast<std::size_t>(l)]) x = b.forward(x, temb_);
    skips.push_back(x);
    x = downs_[static_cast<std::size_t>(l)].forward(x);
  }
  for (std::size_t b = 0; b < middle_.size(); ++b) {
    x = middle_[b].forward(x, temb_);
    if (b == 0) x = mid_attn_.forward(x);
  }
  for (int l = cfg_.stages() - 1; l >= 0; --l) {
    x = PixelShuffle2::forward(ups_[static_cast<std::size_t>(l)].forward(x));
    x = concat_channels(x, skips[static_cast<std::size_t>(l)]);
    for (auto& b : decoders_[static_cast<std::size_t>(l)]) x = b.forward(x, temb_);
  }
  return ending_.forward(x);
}

void UNetBaseline::backward(const Tensor& grad_out) {
  Tensor gtemb = Tensor::like(temb_);
  Tensor g = ending_.backward(grad_out);
  const int levels = cfg_.stages();
  std::vector<Tensor> skip_grads(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) {
    auto& stage = decoders_[static_cast<std::size_t>(l)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, gtemb);
    Tensor gup;
    split_channels(g, g.shape().c - skip_channels_[static_cast<std::size_t>(l)], gup,
                   skip_grads[static_cast<std::size_t>(l)]);
    g = ups_[static_cast<std::size_t>(l)].backward(PixelShuffle2::backward(gup));
  }
  for (std::size_t b = middle_.size(); b-- > 0;) {
    if (b == 0) g = mid_attn_.backward(g);
    g = middle_[b].backward(g, gtemb);
  }
  for (int l = levels - 1; l >= 0; --l) {
    g = downs_[static_cast<std::size_t>(l)].backward(g);
    g += skip_grads[static_cast<std::size_t>(l)];
    auto& stage = encoders_[static_cast<std::size_t>(l)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, gtemb);
  }
  intro_.backward(g);
  t_fc1_.backward(t_act_.backward(t_fc2_.backward(gtemb)));
}

std::unique_ptr<NoiseNetwork> make_noise_network(const NoiseNetConfig& cfg,
                                                 std::uint64_t init_seed) {
  if (cfg.backbone == Backbone::unet) return std::make_unique<UNetBaseline>(cfg, init_seed);
  return std::make_unique<NafNet>(cfg, init_seed);
}

}  // namespace refusion::nn
