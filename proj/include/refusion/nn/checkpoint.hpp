// SPDX-License-Identifier: Apache-2.0
#pragma once

// Noise-network checkpoints in the named-tensor archive format. The manifest
// carries the network config and the serialized SDE schedule, so a
// checkpoint alone is enough to rebuild a sampler.

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "refusion/io/archive.hpp"
#include "refusion/nn/noise_net.hpp"
#include "refusion/sde.hpp"

namespace refusion::nn {

nlohmann::json to_json(const NoiseNetConfig& cfg);
NoiseNetConfig noise_config_from_json(const nlohmann::json& j);

/// Appends every parameter value to the archive under its name.
void store_params(io::Archive& ar, const ParamList& params);
/// Copies archive tensors into `params`, matching by name. Throws ConfigError
/// naming `what` when a tensor is missing or its shape differs.
void load_params(const io::Archive& ar, const ParamList& params, const std::string& what);
/// Copies parameter values (not gradients) between structurally equal lists.
void copy_param_values(const ParamList& from, const ParamList& to);

struct NoiseCheckpoint {
  std::unique_ptr<NoiseNetwork> net;
  sde::Schedule schedule;
  nlohmann::json manifest;
};

/// `extra` entries are merged into the manifest (e.g. the training space).
void save_noise_checkpoint(const std::filesystem::path& path, NoiseNetwork& net,
                           const sde::Schedule& schedule,
                           const nlohmann::json& extra = nlohmann::json::object());
NoiseCheckpoint load_noise_checkpoint(const std::filesystem::path& path);

}  // namespace refusion::nn
