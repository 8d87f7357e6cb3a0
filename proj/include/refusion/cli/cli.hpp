// SPDX-License-Identifier: Apache-2.0
#pragma once

// The `refusion` command line: subcommands, run directories and manifests.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "refusion/io/config.hpp"

namespace refusion::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kMissingInput = 3,
  kDivergence = 4,
};

/// Every accepted configuration key with its default value.
io::Config default_config();

/// Record written as manifest.json into every run directory.
struct RunManifest {
  std::string subcommand;
  std::string version;
  std::string simd_backend;
  std::string status = "ok";  // "ok" or "failed"
  std::string error;
  io::Config config;
  std::map<std::string, std::string> seeds;
  std::map<std::string, std::filesystem::path> inputs;  // role -> absolute path
  std::map<std::string, std::string> input_digests;
  std::map<std::string, std::string> outputs;  // run-relative path -> digest
  std::vector<std::string> checkpoints;
  std::filesystem::path replay_of;

  [[nodiscard]] nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

RunManifest read_manifest(const std::filesystem::path& path);

/// Digest of a file, or of every file below a directory in path order.
std::string path_digest(const std::filesystem::path& path);

/// Runs one command line (program name excluded) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace refusion::cli
