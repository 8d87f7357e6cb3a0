// SPDX-License-Identifier: Apache-2.0
#include "refusion/cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <utility>

#include <CLI11.hpp>

#include "refusion/degrade.hpp"
#include "refusion/errors.hpp"
#include "refusion/io/archive.hpp"
#include "refusion/io/image.hpp"
#include "refusion/io/table.hpp"
#include "refusion/latent/latent_unet.hpp"
#include "refusion/metrics.hpp"
#include "refusion/nn/checkpoint.hpp"
#include "refusion/nn/noise_net.hpp"
#include "refusion/sde.hpp"
#include "refusion/simd/kernels.hpp"
#include "refusion/train/train.hpp"

#ifndef REFUSION_VERSION
#define REFUSION_VERSION "unknown"
#endif

namespace refusion::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest.json";

struct RunContext {
  std::string subcommand;
  io::Config config;
  std::map<std::string, fs::path> inputs;
  fs::path run_dir;
  std::ostream* out = &std::cout;
};

/// Runs a subcommand body; a nonzero return marks a completed run with failures.
using CommandFn = int (*)(RunContext&);

// ---------------------------------------------------------------------------
// Configuration helpers

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

nn::NoiseNetConfig net_config(const io::Config& c) {
  nn::NoiseNetConfig n;
  n.backbone = nn::parse_backbone(c.str("net.backbone"));
  n.width = c.integer("net.width");
  n.enc_blocks = c.int_list("net.enc_blocks");
  n.mid_blocks = c.integer("net.mid_blocks");
  n.dec_blocks = c.int_list("net.dec_blocks");
  n.time_dim = c.integer("net.time_dim");
  return n;
}

latent::LatentUNetConfig unet_config(const io::Config& c) {
  latent::LatentUNetConfig u;
  u.down_factor = c.integer("unet.down_factor");
  u.base_width = c.integer("unet.width");
  u.latent_channels = c.integer("unet.latent_channels");
  u.blocks_per_stage = c.integer("unet.blocks");
  u.mid_blocks = c.integer("unet.mid_blocks");
  return u;
}

degrade::DegradationSpec degrade_spec(const io::Config& c) {
  std::map<std::string, double> params;
  for (const std::string& item : split(c.str("degrade.params"), ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("degrade.params entry '" + item + "' is not name=value");
    }
    io::Config one;
    one.set("v", item.substr(eq + 1));
    params[item.substr(0, eq)] = one.real("v");
  }
  return degrade::make_spec(degrade::parse_kind(c.str("degrade.kind")), params);
}

const fs::path& input(const RunContext& ctx, const std::string& role) {
  const auto it = ctx.inputs.find(role);
  if (it == ctx.inputs.end()) throw MissingInput("missing required input --" + role);
  return it->second;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Corpus and pair data

struct CorpusSplit {
  std::vector<std::pair<std::string, Tensor>> train, val;
};

CorpusSplit split_corpus(const fs::path& dir, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("data.val_fraction must lie in (0, 1)");
  }
  if (!fs::is_directory(dir)) throw MissingInput("corpus directory not found: " + dir.string());
  const auto files = degrade::list_images(dir);
  if (files.size() < 2) {
    throw MissingInput("corpus " + dir.string() + " needs at least two PNG images");
  }
  const std::size_t n = files.size();
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n))), 1, n - 1);
  CorpusSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n - n_val ? split.train : split.val;
    dst.emplace_back(files[i].filename().string(), io::read_png(files[i]));
  }
  return split;
}

std::pair<degrade::PairSet, degrade::PairSet> make_pair_sets(const CorpusSplit& split,
                                                             const io::Config& c, int patch) {
  const auto spec = degrade_spec(c);
  const std::uint64_t seed = c.u64("data.seed");
  auto train = degrade::make_pairs(split.train, spec, patch, c.integer("data.count"), seed,
                                   c.boolean("data.augment"));
  auto val = degrade::make_pairs(split.val, spec, patch, c.integer("data.val_count"), seed + 1,
                                 false);
  return {std::move(train), std::move(val)};
}

train::PairData to_pair_data(const degrade::PairSet& s) { return {s.lq, s.hq}; }

degrade::PairSet load_pair_input(const RunContext& ctx, const std::string& role) {
  const fs::path& p = input(ctx, role);
  if (!fs::exists(p)) throw MissingInput("pair archive not found: " + p.string());
  return degrade::load_pairs(p);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_make_corpus(RunContext& ctx) {
  const auto& c = ctx.config;
  const auto files = degrade::write_synthetic_corpus(ctx.run_dir / "corpus", c.integer("corpus.count"),
                                                     c.integer("corpus.size"), c.u64("corpus.seed"));
  *ctx.out << "wrote " << files.size() << " images\n";
  return kOk;
}

int cmd_make_data(RunContext& ctx) {
  const auto& c = ctx.config;
  const auto split = split_corpus(input(ctx, "corpus"), c.real("data.val_fraction"));
  const auto [train, val] = make_pair_sets(split, c, c.integer("data.patch"));
  degrade::save_pairs(ctx.run_dir / "train.pairs", train);
  degrade::save_pairs(ctx.run_dir / "val.pairs", val);
  *ctx.out << "train pairs: " << train.size() << " from " << split.train.size() << " images\n"
           << "val pairs: " << val.size() << " from " << split.val.size() << " images\n";
  for (const auto& s : train.skipped) *ctx.out << "skipped (smaller than patch): " << s << "\n";
  for (const auto& s : val.skipped) *ctx.out << "skipped (smaller than patch): " << s << "\n";
  return kOk;
}

train::OptimizerSpec unet_optimizer(const io::Config& c) {
  train::OptimizerSpec o;
  o.family = train::parse_family(c.str("unet.optimizer"));
  o.lr0 = c.real("unet.lr");
  o.lr_min = c.real("unet.lr_min");
  o.beta2 = c.real("unet.beta2");
  o.scheduler = train::LrScheduler::cosine;
  o.total_steps = std::max(1, c.integer("unet.iterations"));
  return o;
}

int cmd_pretrain_unet(RunContext& ctx) {
  const auto& c = ctx.config;
  const auto train_set = load_pair_input(ctx, "data");
  const auto val_set = load_pair_input(ctx, "val");
  train::UNetTrainConfig u;
  u.iterations = c.integer("unet.iterations");
  u.batch = c.integer("unet.batch");
  u.optimizer = unet_optimizer(c);
  u.seed = c.u64("unet.seed");
  latent::LatentUNet net(unet_config(c), u.seed);
  const auto history = train::pretrain_unet(u, to_pair_data(train_set), net);
  latent::save_unet_checkpoint(ctx.run_dir / "unet.ckpt", net);

  io::CsvTable table({"step", "loss_lq", "loss_hq", "loss_total", "lr"});
  std::vector<double> totals;
  for (const auto& h : history) {
    totals.push_back(h.loss_lq + h.loss_hq);
    table.add_row({std::to_string(h.step), io::format_double(h.loss_lq),
                   io::format_double(h.loss_hq), io::format_double(totals.back()),
                   io::format_double(h.lr)});
  }
  table.write(ctx.run_dir / "history.csv");
  if (!totals.empty()) {
    const int window = std::min<int>(100, static_cast<int>(totals.size()));
    const auto avg = train::moving_average(totals, window);
    io::PlotSeries s{"total loss (" + std::to_string(window) + "-step average)", {}, avg};
    for (std::size_t i = 0; i < avg.size(); ++i) s.x.push_back(static_cast<double>(i + 1));
    io::write_line_plot(ctx.run_dir / "loss.png", {s});
  }
  const double psnr_lq = train::reconstruction_psnr(net, val_set.lq);
  const double psnr_hq = train::reconstruction_psnr(net, val_set.hq);
  write_json(ctx.run_dir / "summary.json",
             {{"val_reconstruction_psnr_lq", number_or_null(psnr_lq)},
              {"val_reconstruction_psnr_hq", number_or_null(psnr_hq)},
              {"final_loss_total", totals.empty() ? json(nullptr) : json(totals.back())}});
  *ctx.out << "reconstruction PSNR on validation: lq " << psnr_lq << " dB, hq " << psnr_hq
           << " dB\n";
  return kOk;
}

int cmd_train(RunContext& ctx) {
  const auto& c = ctx.config;
  train::TrainConfig tc = train::TrainConfig::from_config(c);
  tc.checkpoint_path = ctx.run_dir / "noise.ckpt";
  const auto train_set = load_pair_input(ctx, "data");
  const auto val_set = load_pair_input(ctx, "val");
  tc.patch = train_set.lq.shape().h;
  nn::NoiseNetConfig ncfg = net_config(c);
  std::unique_ptr<latent::LatentUNet> unet;
  if (tc.space == train::Space::latent) {
    if (!ctx.inputs.contains("unet")) {
      throw ConfigError("train.space = latent needs a pretrained U-Net (--unet)");
    }
    unet = latent::load_unet_checkpoint(input(ctx, "unet"));
    ncfg.image_channels = unet->config().resolved_latent_channels();
  } else if (ctx.inputs.contains("unet")) {
    throw ConfigError("--unet is only used with train.space = latent");
  }
  auto net = nn::make_noise_network(ncfg, c.u64("net.seed"));
  *ctx.out << "noise network: " << net->param_count() << " parameters\n";

  train::TrainHooks hooks;
  hooks.on_step = [&](const train::HistoryRow& row) {
    if (std::isfinite(row.val_psnr)) {
      *ctx.out << "iteration " << row.step << " loss " << row.loss << " val_psnr " << row.val_psnr
               << " dB\n";
    } else if (row.step % 100 == 0) {
      *ctx.out << "iteration " << row.step << " loss " << row.loss << "\n";
    }
  };
  const auto result =
      train::train(tc, to_pair_data(train_set), to_pair_data(val_set), *net, unet.get(), hooks);
  const auto sched = tc.schedule();
  nn::save_noise_checkpoint(ctx.run_dir / "noise.ckpt", *net, sched,
                            {{"space", std::string(train::to_string(tc.space))},
                             {"iteration", tc.iterations}});
  train::write_history(result, ctx.run_dir);
  write_json(ctx.run_dir / "summary.json",
             {{"baseline_psnr", number_or_null(result.baseline_psnr)},
              {"final_val_psnr", number_or_null(result.final_val_psnr)}});
  if (unet) {
    fs::copy_file(input(ctx, "unet"), ctx.run_dir / "unet.ckpt");
    latent::write_pipeline(ctx.run_dir / "pipeline.json",
                           {"unet.ckpt", "noise.ckpt", sde::serialize(sched),
                            io::file_digest(ctx.run_dir / "unet.ckpt"),
                            io::file_digest(ctx.run_dir / "noise.ckpt")});
  }
  *ctx.out << "validation PSNR " << result.final_val_psnr << " dB (degraded input "
           << result.baseline_psnr << " dB)\n";
  return kOk;
}

int cmd_restore(RunContext& ctx) {
  const auto& c = ctx.config;
  const bool has_ckpt = ctx.inputs.contains("checkpoint");
  const bool has_pipe = ctx.inputs.contains("pipeline");
  if (has_ckpt == has_pipe) throw ConfigError("restore needs exactly one of --checkpoint, --pipeline");
  nn::NoiseCheckpoint ck;
  std::unique_ptr<latent::LatentUNet> unet;
  sde::Schedule trained;
  if (has_pipe) {
    const auto m = latent::read_pipeline(input(ctx, "pipeline"));
    ck = nn::load_noise_checkpoint(m.noise);
    unet = latent::load_unet_checkpoint(m.unet);
    trained = sde::parse_schedule(m.schedule);
  } else {
    const fs::path& p = input(ctx, "checkpoint");
    if (!fs::exists(p)) throw MissingInput("checkpoint not found: " + p.string());
    ck = nn::load_noise_checkpoint(p);
    trained = ck.schedule;
    if (ck.net->config().image_channels != 3) {
      throw ConfigError("checkpoint was trained in latent space; restore it through --pipeline");
    }
  }
  const int steps = c.integer("restore.steps");
  if (steps < 0) throw ConfigError("restore.steps must be >= 0");
  sde::Schedule sampler = trained;
  if (steps > 0 && steps != trained.steps) {
    if (trained.kind != sde::ScheduleKind::constant) {
      throw ConfigError("restore.steps can only rescale a constant-rate schedule");
    }
    sampler = sde::default_schedule(steps, trained.lambda, trained.theta_bar.back());
  }
  const auto predict = train::mapped_predictor(*ck.net, trained.steps, sampler);
  const int multiple = ck.net->config().stride() * (unet ? unet->config().down_factor : 1);
  const latent::TileOptions topt{c.integer("restore.tile"), c.integer("restore.overlap"), multiple};

  const fs::path& in = input(ctx, "input");
  std::vector<fs::path> files;
  if (fs::is_directory(in)) {
    files = degrade::list_images(in);
  } else if (fs::exists(in)) {
    files.push_back(in);
  }
  if (files.empty()) throw MissingInput("no PNG images found at " + in.string());
  const std::uint64_t seed0 = c.u64("restore.seed");
  fs::create_directories(ctx.run_dir / "restored");
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Tensor img = io::read_png(files[i]);
    const std::uint64_t seed = seed0 + i;
    const auto fn = [&](const Tensor& t) {
      return unet ? latent::latent_restore(t, *unet, predict, sampler, seed)
                  : sde::restore(t, predict, sampler, seed);
    };
    const Tensor out = latent::tiled_apply(img, fn, topt);
    const fs::path dst = ctx.run_dir / "restored" / (files[i].stem().string() + ".png");
    io::write_png(dst, out);
    *ctx.out << "restored " << files[i].filename().string() << "\n";
  }
  return kOk;
}

int cmd_eval(RunContext& ctx) {
  const fs::path& pred = input(ctx, "pred");
  const fs::path& gt = input(ctx, "gt");
  for (const fs::path& d : {pred, gt}) {
    if (!fs::is_directory(d)) throw MissingInput("image directory not found: " + d.string());
  }
  const auto files = degrade::list_images(pred);
  if (files.empty()) throw MissingInput("no PNG images in " + pred.string());
  io::CsvTable table({"image", "psnr", "ssim", "rmse"});
  double sum_psnr = 0.0, sum_ssim = 0.0, sum_rmse = 0.0;
  for (const fs::path& p : files) {
    const fs::path ref = gt / p.filename();
    if (!fs::exists(ref)) throw MissingInput("no ground truth for " + p.filename().string());
    const auto r = metrics::evaluate(io::read_png(p), io::read_png(ref));
    table.add_row({p.filename().string(), io::format_double(r.psnr), io::format_double(r.ssim),
                   io::format_double(r.rmse)});
    sum_psnr += r.psnr;
    sum_ssim += r.ssim;
    sum_rmse += r.rmse;
  }
  const double n = static_cast<double>(files.size());
  table.add_row({"mean", io::format_double(sum_psnr / n), io::format_double(sum_ssim / n),
                 io::format_double(sum_rmse / n)});
  table.write(ctx.run_dir / "metrics.csv");
  *ctx.out << files.size() << " images: PSNR " << sum_psnr / n << " dB, SSIM " << sum_ssim / n
           << ", RMSE " << sum_rmse / n << "\n";
  return kOk;
}

int cmd_ablate(RunContext& ctx) {
  const auto& c = ctx.config;
  const train::TrainConfig base = train::TrainConfig::from_config(c);
  const nn::NoiseNetConfig ncfg = net_config(c);
  const std::string axis_name = c.str("ablate.axis");
  const auto requested = split(c.str("ablate.values"), ',');
  std::vector<train::AblationAxis> axes;
  if (axis_name == "all") {
    if (!requested.empty()) throw ConfigError("ablate.values must be empty when ablate.axis = all");
    axes = {train::AblationAxis::noise_level, train::AblationAxis::steps,
            train::AblationAxis::patch, train::AblationAxis::optimizer};
  } else {
    axes = {train::parse_axis(axis_name)};
  }
  const auto split_set = split_corpus(input(ctx, "corpus"), c.real("data.val_fraction"));
  const train::DataProvider provider = [&](const train::TrainConfig& cell) {
    const auto [tr, va] = make_pair_sets(split_set, c, cell.patch);
    return std::pair{to_pair_data(tr), to_pair_data(va)};
  };
  json summary = json::object();
  int failed = 0;
  for (const auto axis : axes) {
    const auto values = requested.empty() ? train::default_values(axis) : requested;
    const std::string name(train::to_string(axis));
    *ctx.out << "ablating " << name << " over " << values.size() << " values\n";
    const auto r = train::ablate(axis, values, base, ncfg, c.u64("net.seed"), provider);
    train::write_ablation(r, ctx.run_dir / name);
    std::vector<const train::AblationCell*> ok;
    json cells = json::array();
    for (const auto& cell : r.cells) {
      *ctx.out << "  " << name << " = " << cell.value << ": ";
      if (cell.failed) {
        ++failed;
        *ctx.out << "failed (" << cell.error << ")\n";
      } else {
        ok.push_back(&cell);
        *ctx.out << "final val PSNR " << cell.result.final_val_psnr << " dB\n";
      }
      cells.push_back({{"value", cell.value},
                       {"failed", cell.failed},
                       {"final_val_psnr", number_or_null(cell.result.final_val_psnr)}});
    }
    std::stable_sort(ok.begin(), ok.end(), [](const auto* a, const auto* b) {
      return a->result.final_val_psnr > b->result.final_val_psnr;
    });
    std::string ordering;
    for (const auto* cell : ok) ordering += (ordering.empty() ? "" : " > ") + cell->value;
    *ctx.out << "  ordering by final val PSNR: " << ordering << "\n";
    summary[name] = {{"cells", cells}, {"ordering", ordering}};
  }
  write_json(ctx.run_dir / "summary.json", summary);
  if (failed > 0) {
    *ctx.out << failed << " ablation cell(s) failed\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// Run directories and manifests

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("REFUSION_OUT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

fs::path make_run_dir(const fs::path& root, const std::string& subcommand,
                      const std::string& name) {
  fs::create_directories(root);
  if (!name.empty()) {
    const fs::path dir = root / name;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      throw ConfigError("run directory already exists: " + dir.string());
    }
    fs::create_directories(dir);
    return dir;
  }
  for (int i = 1;; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-%03d", i);
    const fs::path dir = root / (subcommand + buf);
    if (fs::create_directory(dir)) return dir;
  }
}

std::vector<fs::path> files_below(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct CommandInfo {
  CommandFn fn;
  std::vector<std::string> checkpoint_roles;
};

const std::map<std::string, CommandInfo>& commands() {
  static const std::map<std::string, CommandInfo> table{
      {"make-corpus", {cmd_make_corpus, {}}},
      {"make-data", {cmd_make_data, {}}},
      {"pretrain-unet", {cmd_pretrain_unet, {}}},
      {"train", {cmd_train, {"unet"}}},
      {"restore", {cmd_restore, {"checkpoint", "pipeline"}}},
      {"eval", {cmd_eval, {}}},
      {"ablate", {cmd_ablate, {}}},
  };
  return table;
}

std::string backend_name() { return std::string(simd::active().name); }

/// Creates the run directory, runs the command and writes its manifest.
int execute(RunContext ctx, const fs::path& root, const std::string& run_name,
            const fs::path& replay_of, std::ostream& out, fs::path* run_dir = nullptr) {
  const CommandInfo& info = commands().at(ctx.subcommand);
  RunManifest m;
  m.subcommand = ctx.subcommand;
  m.version = REFUSION_VERSION;
  m.simd_backend = backend_name();
  m.config = ctx.config;
  m.replay_of = replay_of;
  for (const auto& [k, v] : ctx.config.entries()) {
    if (k.ends_with("seed")) m.seeds[k] = v;
  }
  for (auto& [role, path] : ctx.inputs) {
    if (!fs::exists(path)) throw MissingInput("input --" + role + " not found: " + path.string());
    path = fs::absolute(path).lexically_normal();
    m.inputs[role] = path;
    m.input_digests[role] = path_digest(path);
  }
  for (const auto& role : info.checkpoint_roles) {
    if (ctx.inputs.contains(role)) m.checkpoints.push_back(ctx.inputs.at(role).string());
  }
  ctx.run_dir = make_run_dir(root, ctx.subcommand, run_name);
  ctx.out = &out;
  if (run_dir != nullptr) *run_dir = ctx.run_dir;

  int code = kOk;
  std::exception_ptr failure;
  try {
    code = info.fn(ctx);
  } catch (const std::exception& e) {
    m.status = "failed";
    m.error = e.what();
    failure = std::current_exception();
  }
  for (const fs::path& rel : files_below(ctx.run_dir)) {
    if (rel == kManifestName) continue;
    m.outputs[rel.generic_string()] = io::file_digest(ctx.run_dir / rel);
    if (rel.extension() == ".ckpt") m.checkpoints.push_back(rel.generic_string());
  }
  if (failure == nullptr && code != kOk) m.status = "failed";
  write_json(ctx.run_dir / kManifestName, m.to_json());
  out << "run directory: " << ctx.run_dir.string() << "\n";
  if (failure) std::rethrow_exception(failure);
  return code;
}

int replay(const fs::path& manifest_path, const fs::path& root, const std::string& run_name,
           std::ostream& out) {
  const RunManifest m = read_manifest(manifest_path);
  if (m.status != "ok") throw ConfigError("cannot replay a failed run: " + m.error);
  if (!commands().contains(m.subcommand)) {
    throw ConfigError("manifest names unknown subcommand '" + m.subcommand + "'");
  }
  for (const auto& [role, path] : m.inputs) {
    if (!fs::exists(path)) throw MissingInput("recorded input --" + role + " is gone: " + path.string());
    if (path_digest(path) != m.input_digests.at(role)) {
      throw ConfigError("recorded input --" + role + " changed since the run: " + path.string());
    }
  }
  std::optional<simd::ScopedBackend> backend;
  if (m.simd_backend == "scalar") {
    backend.emplace(simd::Backend::scalar);
  } else if (m.simd_backend == "avx2") {
    if (simd::avx2_kernels() == nullptr) throw ConfigError("recorded run used AVX2, unavailable here");
    backend.emplace(simd::Backend::avx2);
  } else {
    throw ConfigError("manifest names unknown SIMD backend '" + m.simd_backend + "'");
  }
  RunContext ctx;
  ctx.subcommand = m.subcommand;
  ctx.config = m.config;
  ctx.inputs = m.inputs;
  fs::path new_dir;
  execute(ctx, root, run_name, fs::absolute(manifest_path).lexically_normal(), out, &new_dir);
  const RunManifest fresh = read_manifest(new_dir / kManifestName);

  std::vector<std::string> diffs;
  for (const auto& [rel, digest] : m.outputs) {
    const auto it = fresh.outputs.find(rel);
    if (it == fresh.outputs.end()) {
      diffs.push_back("missing " + rel);
    } else if (it->second != digest) {
      diffs.push_back("differs " + rel);
    }
  }
  for (const auto& [rel, digest] : fresh.outputs) {
    if (!m.outputs.contains(rel)) diffs.push_back("extra " + rel);
  }
  out << "replayed " << m.subcommand << " into " << new_dir.string() << "\n";
  if (!diffs.empty()) {
    for (const auto& d : diffs) out << "  " << d << "\n";
    out << "replay mismatch: " << diffs.size() << " of " << m.outputs.size() << " outputs\n";
    return kFailure;
  }
  out << "replay identical: " << m.outputs.size() << " outputs\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Command line

struct CommonFlags {
  std::string out;
  std::string name;
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;
  std::map<std::string, std::string> inputs;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--out", f.out, "Output root (default: $REFUSION_OUT, else ./runs)");
  sub->add_option("--name", f.name, "Run directory name (default: <subcommand>-NNN)");
  sub->add_option("--config", f.config_file, "Config file of key = value lines");
  sub->add_option("--set", f.sets, "Override one config key, as key=value (repeatable)");
}

void add_key_flag(CLI::App* sub, CommonFlags& f, const std::string& flag, const std::string& key,
                  const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&f, key](const std::string& v) { f.flags.emplace_back(key, v); },
      help + " [" + key + "]");
}

void add_input(CLI::App* sub, CommonFlags& f, const std::string& role, const std::string& help,
               bool required) {
  auto* opt = sub->add_option("--" + role, f.inputs[role], help);
  if (required) opt->required();
}

io::Config resolve_config(const CommonFlags& f) {
  io::Config cfg = default_config();
  if (!f.config_file.empty()) cfg.merge(io::Config::load(f.config_file));
  for (const auto& s : f.sets) cfg.apply_override(s);
  for (const auto& [k, v] : f.flags) cfg.set(k, v);
  return cfg;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image restoration with a mean-reverting SDE", "refusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", REFUSION_VERSION);
  std::map<std::string, CommonFlags> flags;

  auto* corpus = app.add_subcommand("make-corpus", "Write a synthetic PNG corpus");
  add_common(corpus, flags["make-corpus"]);
  add_key_flag(corpus, flags["make-corpus"], "--count", "corpus.count", "Number of images");
  add_key_flag(corpus, flags["make-corpus"], "--size", "corpus.size", "Image side length");
  add_key_flag(corpus, flags["make-corpus"], "--seed", "corpus.seed", "Random seed");

  auto* data = app.add_subcommand("make-data", "Cut degraded/clean patch pairs from a corpus");
  add_common(data, flags["make-data"]);
  add_input(data, flags["make-data"], "corpus", "Directory of PNG images", true);
  add_key_flag(data, flags["make-data"], "--patch", "data.patch", "Patch side length");
  add_key_flag(data, flags["make-data"], "--count", "data.count", "Training pairs");
  add_key_flag(data, flags["make-data"], "--val-count", "data.val_count", "Validation pairs");
  add_key_flag(data, flags["make-data"], "--degradation", "degrade.kind", "Degradation kind");
  add_key_flag(data, flags["make-data"], "--params", "degrade.params",
               "Degradation parameters, name=value,...");
  add_key_flag(data, flags["make-data"], "--seed", "data.seed", "Random seed");

  auto* pre = app.add_subcommand("pretrain-unet", "Train the latent U-Net by latent replacement");
  add_common(pre, flags["pretrain-unet"]);
  add_input(pre, flags["pretrain-unet"], "data", "Training pair archive", true);
  add_input(pre, flags["pretrain-unet"], "val", "Validation pair archive", true);
  add_key_flag(pre, flags["pretrain-unet"], "--iterations", "unet.iterations", "Iterations");
  add_key_flag(pre, flags["pretrain-unet"], "--down-factor", "unet.down_factor",
               "Spatial compression per side (4 or 8)");
  add_key_flag(pre, flags["pretrain-unet"], "--width", "unet.width", "Base channel width");
  add_key_flag(pre, flags["pretrain-unet"], "--seed", "unet.seed", "Random seed");

  auto* tr = app.add_subcommand("train", "Train the noise network");
  add_common(tr, flags["train"]);
  add_input(tr, flags["train"], "data", "Training pair archive", true);
  add_input(tr, flags["train"], "val", "Validation pair archive", true);
  add_input(tr, flags["train"], "unet", "Pretrained U-Net checkpoint (latent space)", false);
  add_key_flag(tr, flags["train"], "--iterations", "train.iterations", "Iterations");
  add_key_flag(tr, flags["train"], "--space", "train.space", "pixel or latent");
  add_key_flag(tr, flags["train"], "--noise-level", "sde.noise_level", "Stationary noise level");
  add_key_flag(tr, flags["train"], "--steps", "sde.steps", "Diffusion steps T");
  add_key_flag(tr, flags["train"], "--optimizer", "train.optimizer", "lion, adam or adamw");
  add_key_flag(tr, flags["train"], "--lr", "train.lr", "Initial learning rate");
  add_key_flag(tr, flags["train"], "--batch", "train.batch", "Batch size");
  add_key_flag(tr, flags["train"], "--seed", "train.seed", "Random seed");

  auto* rs = app.add_subcommand("restore", "Restore degraded images");
  add_common(rs, flags["restore"]);
  add_input(rs, flags["restore"], "input", "PNG image or directory of PNG images", true);
  add_input(rs, flags["restore"], "checkpoint", "Pixel-space noise network checkpoint", false);
  add_input(rs, flags["restore"], "pipeline", "Latent pipeline manifest", false);
  add_key_flag(rs, flags["restore"], "--steps", "restore.steps",
               "Sampler steps (0 keeps the trained T)");
  add_key_flag(rs, flags["restore"], "--tile", "restore.tile", "Tile side length");
  add_key_flag(rs, flags["restore"], "--overlap", "restore.overlap", "Tile overlap");
  add_key_flag(rs, flags["restore"], "--seed", "restore.seed", "Sampler seed");

  auto* ev = app.add_subcommand("eval", "Score restored images against ground truth");
  add_common(ev, flags["eval"]);
  add_input(ev, flags["eval"], "pred", "Directory of restored images", true);
  add_input(ev, flags["eval"], "gt", "Directory of reference images with matching names", true);

  auto* ab = app.add_subcommand("ablate", "Run a training ablation over one axis");
  add_common(ab, flags["ablate"]);
  add_input(ab, flags["ablate"], "corpus", "Directory of PNG images", true);
  add_key_flag(ab, flags["ablate"], "--axis", "ablate.axis",
               "noise_level, steps, patch, optimizer or all");
  add_key_flag(ab, flags["ablate"], "--values", "ablate.values", "Comma-separated axis values");
  add_key_flag(ab, flags["ablate"], "--iterations", "train.iterations", "Iterations per cell");

  std::string replay_manifest, replay_out, replay_name;
  auto* rp = app.add_subcommand("replay", "Rerun a recorded run and compare its outputs");
  rp->add_option("manifest", replay_manifest, "manifest.json of the run to replay")->required();
  rp->add_option("--out", replay_out, "Output root (default: $REFUSION_OUT, else ./runs)");
  rp->add_option("--name", replay_name, "Run directory name");

  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  add_common(show, flags["config"]);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  if (rp->parsed()) return replay(replay_manifest, output_root(replay_out), replay_name, out);
  if (show->parsed()) {
    out << resolve_config(flags["config"]).dump();
    return kOk;
  }
  for (const auto& [name, info] : commands()) {
    CLI::App* sub = app.get_subcommand(name);
    if (!sub->parsed()) continue;
    CommonFlags& f = flags[name];
    RunContext ctx;
    ctx.subcommand = name;
    ctx.config = resolve_config(f);
    for (const auto& [role, path] : f.inputs) {
      if (!path.empty()) ctx.inputs[role] = path;
    }
    return execute(std::move(ctx), output_root(f.out), f.name, {}, out);
  }
  return kFailure;
}

}  // namespace

io::Config default_config() {
  io::Config c = train::TrainConfig{}.to_config();
  const std::pair<const char*, const char*> defaults[] = {
      {"corpus.count", "64"},         {"corpus.size", "128"},
      {"corpus.seed", "0"},           {"data.count", "1000"},
      {"data.val_count", "32"},       {"data.val_fraction", "0.25"},
      {"data.augment", "true"},       {"data.seed", "0"},
      {"degrade.kind", "blur_noise"}, {"degrade.params", ""},
      {"net.backbone", "nafnet"},     {"net.width", "16"},
      {"net.enc_blocks", "1,1,1"},    {"net.mid_blocks", "1"},
      {"net.dec_blocks", "1,1,1"},    {"net.time_dim", "32"},
      {"net.seed", "0"},              {"unet.down_factor", "4"},
      {"unet.width", "16"},           {"unet.latent_channels", "0"},
      {"unet.blocks", "1"},           {"unet.mid_blocks", "1"},
      {"unet.iterations", "2000"},    {"unet.batch", "8"},
      {"unet.optimizer", "adamw"},    {"unet.lr", "2e-3"},
      {"unet.lr_min", "1e-6"},        {"unet.beta2", "0.999"},
      {"unet.seed", "0"},
      {"restore.steps", "0"},         {"restore.tile", "1024"},
      {"restore.overlap", "64"},      {"restore.seed", "0"},
      {"ablate.axis", "noise_level"}, {"ablate.values", ""},
  };
  for (const auto& [k, v] : defaults) c.set(k, v);
  return c;
}

json RunManifest::to_json() const {
  json inputs_j = json::object();
  for (const auto& [role, path] : inputs) {
    inputs_j[role] = {{"path", path.string()}, {"digest", input_digests.at(role)}};
  }
  json j{{"subcommand", subcommand},
         {"version", version},
         {"simd_backend", simd_backend},
         {"status", status},
         {"config", config.to_json()},
         {"seeds", seeds},
         {"inputs", inputs_j},
         {"outputs", outputs},
         {"checkpoints", checkpoints}};
  if (!error.empty()) j["error"] = error;
  if (!replay_of.empty()) j["replay_of"] = replay_of.string();
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.simd_backend = j.at("simd_backend").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.error = j.value("error", "");
    m.config = io::Config::from_json(j.at("config"));
    m.seeds = j.at("seeds").get<std::map<std::string, std::string>>();
    for (const auto& [role, v] : j.at("inputs").items()) {
      m.inputs[role] = v.at("path").get<std::string>();
      m.input_digests[role] = v.at("digest").get<std::string>();
    }
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
    m.replay_of = j.value("replay_of", "");
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run manifest: ") + e.what());
  }
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("run manifest not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunManifest::from_json(j);
}

std::string path_digest(const fs::path& path) {
  if (!fs::is_directory(path)) return io::file_digest(path);
  std::string listing;
  for (const fs::path& rel : files_below(path)) {
    listing += rel.generic_string() + "\t" + io::file_digest(path / rel) + "\n";
  }
  return io::bytes_digest(listing);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingInput& e) {
    err << "missing input: " << e.what() << "\n";
    return kMissingInput;
  } catch (const Divergence& e) {
    err << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace refusion::cli
