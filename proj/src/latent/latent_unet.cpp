// SPDX-License-Identifier: Apache-2.0
#include "refusion/latent/latent_unet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "refusion/errors.hpp"
#include "refusion/io/archive.hpp"
#include "refusion/nn/checkpoint.hpp"

namespace refusion::latent {

using nn::Conv2d;
using nn::NafBlock;
using nn::PixelShuffle2;

int LatentUNetConfig::stages() const {
  int s = 0;
  while ((1 << s) < down_factor) ++s;
  return s;
}

void LatentUNetConfig::validate() const {
  if (image_channels < 1) throw std::invalid_argument("unet: image_channels must be >= 1");
  if (down_factor < 2 || (down_factor & (down_factor - 1)) != 0) {
    throw std::invalid_argument("unet: down_factor must be a power of two >= 2");
  }
  if (base_width < 2 || base_width % 2 != 0) {
    throw std::invalid_argument("unet: base_width must be even and >= 2");
  }
  if (latent_channels < 0) throw std::invalid_argument("unet: latent_channels must be >= 0");
  if (blocks_per_stage < 1 || mid_blocks < 1) {
    throw std::invalid_argument("unet: block counts must be >= 1");
  }
}

nlohmann::json to_json(const LatentUNetConfig& cfg) {
  return {{"image_channels", cfg.image_channels}, {"down_factor", cfg.down_factor},
          {"base_width", cfg.base_width},         {"latent_channels", cfg.latent_channels},
          {"blocks_per_stage", cfg.blocks_per_stage}, {"mid_blocks", cfg.mid_blocks}};
}

LatentUNetConfig unet_config_from_json(const nlohmann::json& j) {
  LatentUNetConfig cfg;
  try {
    cfg.image_channels = j.at("image_channels").get<int>();
    cfg.down_factor = j.at("down_factor").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    cfg.mid_blocks = j.at("mid_blocks").get<int>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad unet config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bad unet config: ") + e.what());
  }
  return cfg;
}

LatentUNet::LatentUNet(const LatentUNetConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const int S = cfg_.stages();
  const int w = cfg_.base_width;
  const int deep = w << S;
  const int lc = cfg_.resolved_latent_channels();
  intro_ = Conv2d("enc.intro", cfg_.image_channels, w, 3, 1, 1);
  for (int s = 0; s < S; ++s) {
    const int ch = w << s;
    std::vector<NafBlock> enc, dec;
    for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
      const std::string tag = std::to_string(s) + "." + std::to_string(b);
      enc.emplace_back("enc.stage" + tag, ch, 0);
      dec.emplace_back("dec.stage" + tag, ch, 0);
    }
    enc_.push_back(std::move(enc));
    dec_.push_back(std::move(dec));
    downs_.emplace_back("enc.down" + std::to_string(s), ch, 2 * ch, 2, 2, 0);
    ups_.emplace_back("dec.up" + std::to_string(s), 2 * ch, 4 * ch, 1, 1, 0, false);
  }
  for (int b = 0; b < cfg_.mid_blocks; ++b) {
    enc_mid_.emplace_back("enc.mid." + std::to_string(b), deep, 0);
    dec_mid_.emplace_back("dec.mid." + std::to_string(b), deep, 0);
  }
  to_latent_ = Conv2d("enc.to_latent", deep, lc, 1, 1, 0);
  from_latent_ = Conv2d("dec.from_latent", lc, deep, 1, 1, 0);
  ending_ = Conv2d("dec.ending", w, cfg_.image_channels, 3, 1, 1);

  Rng rng(init_seed);
  intro_.init(rng);
  for (int s = 0; s < S; ++s) {
    for (auto& b : enc_[static_cast<std::size_t>(s)]) b.init(rng);
    downs_[static_cast<std::size_t>(s)].init(rng);
  }
  for (auto& b : enc_mid_) b.init(rng);
  to_latent_.init(rng);
  from_latent_.init(rng);
  for (auto& b : dec_mid_) b.init(rng);
  for (int s = S - 1; s >= 0; --s) {
    ups_[static_cast<std::size_t>(s)].init(rng);
    for (auto& b : dec_[static_cast<std::size_t>(s)]) b.init(rng);
  }
  ending_.init(rng);
}

nn::ParamList LatentUNet::params() {
  nn::ParamList out;
  const int S = cfg_.stages();
  intro_.collect(out);
  for (int s = 0; s < S; ++s) {
    for (auto& b : enc_[static_cast<std::size_t>(s)]) b.collect(out);
    downs_[static_cast<std::size_t>(s)].collect(out);
  }
  for (auto& b : enc_mid_) b.collect(out);
  to_latent_.collect(out);
  from_latent_.collect(out);
  for (auto& b : dec_mid_) b.collect(out);
  for (int s = S - 1; s >= 0; --s) {
    ups_[static_cast<std::size_t>(s)].collect(out);
    for (auto& b : dec_[static_cast<std::size_t>(s)]) b.collect(out);
  }
  ending_.collect(out);
  return out;
}

std::vector<Shape> LatentUNet::skip_shapes(int n, int h, int w) const {
  std::vector<Shape> out;
  for (int s = 0; s < cfg_.stages(); ++s) out.push_back({n, cfg_.base_width << s, h >> s, w >> s});
  return out;
}

LatentPack LatentUNet::encode(const Tensor& img) {
  const Shape& s = img.shape();
  if (s.c != cfg_.image_channels) {
    throw std::invalid_argument("encode: expected " + std::to_string(cfg_.image_channels) +
                                " channels, got " + s.str());
  }
  nn::check_spatial(s, cfg_.down_factor, "encode");
  LatentPack pack;
  Tensor x = intro_.forward(img);
  for (int st = 0; st < cfg_.stages(); ++st) {
    for (auto& b : enc_[static_cast<std::size_t>(st)]) x = b.forward(x, nullptr);
    pack.skips.push_back(x);
    x = downs_[static_cast<std::size_t>(st)].forward(x);
  }
  for (auto& b : enc_mid_) x = b.forward(x, nullptr);
  pack.latent = to_latent_.forward(x);
  return pack;
}

Tensor LatentUNet::decode(const LatentPack& pack, bool clamp) {
  const int S = cfg_.stages();
  const Shape& ls = pack.latent.shape();
  if (ls.c != cfg_.resolved_latent_channels()) {
    throw std::invalid_argument("decode: latent has " + std::to_string(ls.c) + " channels, expected " +
                                std::to_string(cfg_.resolved_latent_channels()));
  }
  if (static_cast<int>(pack.skips.size()) != S) {
    throw std::invalid_argument("decode: expected " + std::to_string(S) + " skips, got " +
                                std::to_string(pack.skips.size()));
  }
  const auto expect = skip_shapes(ls.n, ls.h * cfg_.down_factor, ls.w * cfg_.down_factor);
  for (int st = 0; st < S; ++st) {
    if (pack.skips[static_cast<std::size_t>(st)].shape() != expect[static_cast<std::size_t>(st)]) {
      throw std::invalid_argument("decode: skip " + std::to_string(st) + " has shape " +
                                  pack.skips[static_cast<std::size_t>(st)].shape().str() +
                                  ", latent " + ls.str() + " requires " +
                                  expect[static_cast<std::size_t>(st)].str());
    }
  }
  Tensor x = from_latent_.forward(pack.latent);
  for (auto& b : dec_mid_) x = b.forward(x, nullptr);
  for (int st = S - 1; st >= 0; --st) {
    x = PixelShuffle2::forward(ups_[static_cast<std::size_t>(st)].forward(x));
    x += pack.skips[static_cast<std::size_t>(st)];
    for (auto& b : dec_[static_cast<std::size_t>(st)]) x = b.forward(x, nullptr);
  }
  Tensor out = ending_.forward(x);
  return clamp ? clamped(out) : out;
}

LatentPack LatentUNet::backward_decode(const Tensor& grad_out) {
  const int S = cfg_.stages();
  LatentPack grad;
  grad.skips.resize(static_cast<std::size_t>(S));
  Tensor g = ending_.backward(grad_out);
  for (int st = 0; st < S; ++st) {
    auto& stage = dec_[static_cast<std::size_t>(st)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, nullptr);
    grad.skips[static_cast<std::size_t>(st)] = g;
    g = ups_[static_cast<std::size_t>(st)].backward(PixelShuffle2::backward(g));
  }
  for (auto it = dec_mid_.rbegin(); it != dec_mid_.rend(); ++it) g = it->backward(g, nullptr);
  grad.latent = from_latent_.backward(g);
  return grad;
}

void LatentUNet::backward_encode(const LatentPack& grad) {
  const int S = cfg_.stages();
  Tensor g = to_latent_.backward(grad.latent);
  for (auto it = enc_mid_.rbegin(); it != enc_mid_.rend(); ++it) g = it->backward(g, nullptr);
  for (int st = S - 1; st >= 0; --st) {
    g = downs_[static_cast<std::size_t>(st)].backward(g);
    if (static_cast<int>(grad.skips.size()) == S && !grad.skips[static_cast<std::size_t>(st)].empty()) {
      g += grad.skips[static_cast<std::size_t>(st)];
    }
    auto& stage = enc_[static_cast<std::size_t>(st)];
    for (auto it = stage.rbegin(); it != stage.rend(); ++it) g = it->backward(g, nullptr);
  }
  intro_.backward(g);
}

std::uint64_t LatentUNet::encode_macs(int h, int w) const {
  std::uint64_t m = intro_.macs(h, w);
  for (int st = 0; st < cfg_.stages(); ++st) {
    for (const auto& b : enc_[static_cast<std::size_t>(st)]) m += b.macs(h >> st, w >> st);
    m += downs_[static_cast<std::size_t>(st)].macs(h >> st, w >> st);
  }
  const int S = cfg_.stages();
  for (const auto& b : enc_mid_) m += b.macs(h >> S, w >> S);
  return m + to_latent_.macs(h >> S, w >> S);
}

std::uint64_t LatentUNet::decode_macs(int h, int w) const {
  const int S = cfg_.stages();
  std::uint64_t m = from_latent_.macs(h >> S, w >> S) + ending_.macs(h, w);
  for (const auto& b : dec_mid_) m += b.macs(h >> S, w >> S);
  for (int st = 0; st < S; ++st) {
    m += ups_[static_cast<std::size_t>(st)].macs(h >> (st + 1), w >> (st + 1));
    for (const auto& b : dec_[static_cast<std::size_t>(st)]) m += b.macs(h >> st, w >> st);
  }
  return m;
}

double l1_loss(const Tensor& a, const Tensor& b, Tensor* grad_a) {
  require_same_shape(a, b, "l1_loss");
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  if (grad_a) *grad_a = Tensor::like(a);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += std::abs(d);
    if (grad_a) (*grad_a)[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return acc * inv;
}

ReplaceLosses latent_replace_grads(LatentUNet& net, LatentUNet& replica, const Tensor& lq,
                                   const Tensor& hq) {
  require_same_shape(lq, hq, "latent_replace");
  if (!(net.config() == replica.config())) {
    throw std::invalid_argument("latent_replace: replica config differs");
  }
  const nn::ParamList main_params = net.params();
  const nn::ParamList rep_params = replica.params();
  nn::copy_param_values(main_params, rep_params);
  nn::zero_grad(rep_params);

  // LQ branch on the main instance, HQ branch on the replica. The HQ decode
  // receives the LQ skips; the HQ encoder contributes only its latent.
  const LatentPack lq_pack = net.encode(lq);
  const Tensor out_lq = net.decode(lq_pack, false);
  const LatentPack hq_pack = replica.encode(hq);
  const Tensor out_hq = replica.decode(LatentPack{hq_pack.latent, lq_pack.skips}, false);

  ReplaceLosses losses;
  Tensor g_lq, g_hq;
  losses.loss_lq = l1_loss(out_lq, lq, &g_lq);
  losses.loss_hq = l1_loss(out_hq, hq, &g_hq);
  if (!std::isfinite(losses.loss_lq) || !std::isfinite(losses.loss_hq)) {
    throw Divergence("latent replace: non-finite loss");
  }

  const LatentPack grad_hq_dec = replica.backward_decode(g_hq);
  replica.backward_encode(LatentPack{grad_hq_dec.latent, {}});
  LatentPack grad_lq_dec = net.backward_decode(g_lq);
  for (std::size_t s = 0; s < grad_lq_dec.skips.size(); ++s) {
    grad_lq_dec.skips[s] += grad_hq_dec.skips[s];
  }
  net.backward_encode(grad_lq_dec);
  for (std::size_t i = 0; i < main_params.size(); ++i) main_params[i]->grad += rep_params[i]->grad;
  return losses;
}

Tensor latent_restore(const Tensor& lq, LatentUNet& unet, const sde::NoisePredictor& predict,
                      const sde::Schedule& sched, std::uint64_t seed) {
  const LatentPack pack = unet.encode(lq);
  sde::RestoreOptions opt;
  opt.clamp_output = false;
  const Tensor z = sde::restore(pack.latent, predict, sched, seed, opt);
  return unet.decode(LatentPack{z, pack.skips}, true);
}

std::uint64_t diffusion_loop_macs(const nn::NoiseNetwork& net, int h, int w, int steps) {
  return static_cast<std::uint64_t>(steps) * net.macs(h, w);
}

// ---- tiling ----

Tensor crop(const Tensor& img, int y, int x, int h, int w) {
  const Shape& s = img.shape();
  if (y < 0 || x < 0 || y + h > s.h || x + w > s.w) throw std::invalid_argument("crop out of range");
  Tensor out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int r = 0; r < h; ++r) {
        std::copy_n(img.plane(n, c) + static_cast<std::size_t>(y + r) * s.w + x, w,
                    out.plane(n, c) + static_cast<std::size_t>(r) * w);
      }
    }
  }
  return out;
}

Tensor pad_to_multiple(const Tensor& img, int multiple) {
  const Shape& s = img.shape();
  const int h = (s.h + multiple - 1) / multiple * multiple;
  const int w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return img;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out.at(n, c, y, x) = img.at(n, c, reflect(y, s.h), reflect(x, s.w));
      }
    }
  }
  return out;
}

namespace {

std::vector<int> tile_starts(int size, int tile, int overlap) {
  if (size <= tile) return {0};
  std::vector<int> starts;
  const int step = tile - overlap;
  for (int p = 0;; p += step) {
    if (p + tile >= size) {
      starts.push_back(size - tile);
      break;
    }
    starts.push_back(p);
  }
  return starts;
}

// Weight of position i inside a tile starting at `start`: ramps up across the
// overlap with the previous tile and down across the overlap with the next.
double ramp(int i, int len, int start, int size, int overlap) {
  double wgt = 1.0;
  if (start > 0 && i < overlap) wgt = std::min(wgt, (i + 1.0) / (overlap + 1.0));
  if (start + len < size && i >= len - overlap) wgt = std::min(wgt, (len - i) / (overlap + 1.0));
  return wgt;
}

}  // namespace

Tensor tiled_apply(const Tensor& img, const std::function<Tensor(const Tensor&)>& fn,
                   TileOptions opt) {
  if (opt.multiple < 1 || opt.overlap < 0 || opt.tile <= opt.overlap || opt.tile % opt.multiple) {
    throw std::invalid_argument("tiled_apply: need tile > overlap >= 0 and tile % multiple == 0");
  }
  const Shape& s = img.shape();
  const Tensor padded = pad_to_multiple(img, opt.multiple);
  const Shape& ps = padded.shape();
  auto run = [&](const Tensor& t) {
    Tensor out = fn(t);
    if (out.shape() != t.shape()) throw std::runtime_error("tiled_apply: function changed the shape");
    return out;
  };
  Tensor result;
  if (ps.h <= opt.tile && ps.w <= opt.tile) {
    result = run(padded);
  } else {
    Tensor acc(ps), weight({1, 1, ps.h, ps.w});
    const int th = std::min(opt.tile, ps.h), tw = std::min(opt.tile, ps.w);
    for (int y0 : tile_starts(ps.h, th, opt.overlap)) {
      for (int x0 : tile_starts(ps.w, tw, opt.overlap)) {
        const Tensor out = run(crop(padded, y0, x0, th, tw));
        for (int y = 0; y < th; ++y) {
          const double wy = ramp(y, th, y0, ps.h, opt.overlap);
          for (int x = 0; x < tw; ++x) {
            const double wgt = wy * ramp(x, tw, x0, ps.w, opt.overlap);
            weight.at(0, 0, y0 + y, x0 + x) += wgt;
            for (int n = 0; n < ps.n; ++n) {
              for (int c = 0; c < ps.c; ++c) acc.at(n, c, y0 + y, x0 + x) += wgt * out.at(n, c, y, x);
            }
          }
        }
      }
    }
    for (int n = 0; n < ps.n; ++n) {
      for (int c = 0; c < ps.c; ++c) {
        for (int y = 0; y < ps.h; ++y) {
          for (int x = 0; x < ps.w; ++x) acc.at(n, c, y, x) /= weight.at(0, 0, y, x);
        }
      }
    }
    result = std::move(acc);
  }
  return ps == s ? result : crop(result, 0, 0, s.h, s.w);
}

// ---- checkpoints ----

void save_unet_checkpoint(const std::filesystem::path& path, LatentUNet& net,
                          const nlohmann::json& extra) {
  io::Archive ar;
  ar.manifest = extra.is_object() ? extra : nlohmann::json::object();
  ar.manifest["type"] = "latent_unet";
  ar.manifest["config"] = to_json(net.config());
  nn::store_params(ar, net.params());
  io::save_archive(path, ar);
}

std::unique_ptr<LatentUNet> load_unet_checkpoint(const std::filesystem::path& path) {
  const io::Archive ar = io::load_archive(path);
  if (ar.manifest.value("type", "") != "latent_unet") {
    throw ConfigError(path.string() + " is not a U-Net checkpoint");
  }
  auto net = std::make_unique<LatentUNet>(unet_config_from_json(ar.manifest.at("config")), 0);
  nn::load_params(ar, net->params(), path.string());
  return net;
}

nlohmann::json PipelineManifest::to_json() const {
  return {{"type", "latent_pipeline"}, {"unet", unet.string()},   {"noise", noise.string()},
          {"schedule", schedule},      {"unet_digest", unet_digest}, {"noise_digest", noise_digest}};
}

PipelineManifest PipelineManifest::from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "latent_pipeline") throw ConfigError("not a latent pipeline manifest");
  PipelineManifest m;
  m.unet = j.at("unet").get<std::string>();
  m.noise = j.at("noise").get<std::string>();
  m.schedule = j.at("schedule").get<std::string>();
  m.unet_digest = j.at("unet_digest").get<std::string>();
  m.noise_digest = j.at("noise_digest").get<std::string>();
  return m;
}

void write_pipeline(const std::filesystem::path& path, const PipelineManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << m.to_json().dump(2) << "\n";
}

PipelineManifest read_pipeline(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("pipeline manifest not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  PipelineManifest m = PipelineManifest::from_json(j);
  // Relative references resolve against the manifest's directory.
  const auto base = path.parent_path();
  if (m.unet.is_relative()) m.unet = base / m.unet;
  if (m.noise.is_relative()) m.noise = base / m.noise;
  for (const auto& [file, digest] : {std::pair{m.unet, m.unet_digest}, std::pair{m.noise, m.noise_digest}}) {
    if (!std::filesystem::exists(file)) throw MissingInput("pipeline references missing " + file.string());
    if (io::file_digest(file) != digest) {
      throw ConfigError("pipeline digest mismatch for " + file.string());
    }
  }
  return m;
}

}  // namespace refusion::latent
