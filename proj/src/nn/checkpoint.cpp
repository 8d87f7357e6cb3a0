// SPDX-License-Identifier: Apache-2.0
#include "refusion/nn/checkpoint.hpp"

#include <map>

#include "refusion/errors.hpp"

namespace refusion::nn {

nlohmann::json to_json(const NoiseNetConfig& cfg) {
  return {{"backbone", std::string(to_string(cfg.backbone))},
          {"image_channels", cfg.image_channels},
          {"width", cfg.width},
          {"enc_blocks", cfg.enc_blocks},
          {"mid_blocks", cfg.mid_blocks},
          {"dec_blocks", cfg.dec_blocks},
          {"time_dim", cfg.time_dim}};
}

NoiseNetConfig noise_config_from_json(const nlohmann::json& j) {
  NoiseNetConfig cfg;
  try {
    cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
    cfg.image_channels = j.at("image_channels").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.enc_blocks = j.at("enc_blocks").get<std::vector<int>>();
    cfg.mid_blocks = j.at("mid_blocks").get<int>();
    cfg.dec_blocks = j.at("dec_blocks").get<std::vector<int>>();
    cfg.time_dim = j.at("time_dim").get<int>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bad network config: ") + e.what());
  }
  return cfg;
}

void store_params(io::Archive& ar, const ParamList& params) {
  for (const Param* p : params) ar.tensors.push_back({p->name, p->value});
}

void load_params(const io::Archive& ar, const ParamList& params, const std::string& what) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : ar.tensors) by_name[t.name] = &t.value;
  for (Param* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw ConfigError(what + ": missing tensor " + p->name);
    if (it->second->shape() != p->value.shape()) {
      throw ConfigError(what + ": tensor " + p->name + " has shape " + it->second->shape().str() +
                        ", config expects " + p->value.shape().str());
    }
    p->value = *it->second;
  }
  if (by_name.size() != params.size()) {
    throw ConfigError(what + ": archive holds " + std::to_string(by_name.size()) +
                      " tensors, config expects " + std::to_string(params.size()));
  }
}

void copy_param_values(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    require_same_shape(from[i]->value, to[i]->value, "copy_param_values");
    to[i]->value = from[i]->value;
  }
}

void save_noise_checkpoint(const std::filesystem::path& path, NoiseNetwork& net,
                           const sde::Schedule& schedule, const nlohmann::json& extra) {
  io::Archive ar;
  ar.manifest = extra.is_object() ? extra : nlohmann::json::object();
  ar.manifest["type"] = "noise_net";
  ar.manifest["config"] = to_json(net.config());
  ar.manifest["schedule"] = sde::serialize(schedule);
  store_params(ar, net.params());
  io::save_archive(path, ar);
}

NoiseCheckpoint load_noise_checkpoint(const std::filesystem::path& path) {
  io::Archive ar = io::load_archive(path);
  if (ar.manifest.value("type", "") != "noise_net") {
    throw ConfigError(path.string() + " is not a noise-network checkpoint");
  }
  NoiseCheckpoint ck;
  ck.net = make_noise_network(noise_config_from_json(ar.manifest.at("config")), 0);
  try {
    ck.schedule = sde::parse_schedule(ar.manifest.at("schedule").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path.string() + ": bad schedule: " + e.what());
  }
  load_params(ar, ck.net->params(), path.string());
  ck.manifest = std::move(ar.manifest);
  return ck;
}

}  // namespace refusion::nn
