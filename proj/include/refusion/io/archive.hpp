// SPDX-License-Identifier: Apache-2.0
#pragma once

// Named-tensor archive: a little-endian binary file holding a JSON manifest
// and an ordered list of (name, shape, float64 data) records. Used for
// network checkpoints and for paired patch datasets.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "refusion/tensor.hpp"

namespace refusion::io {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  /// Throws ConfigError when the name is absent.
  [[nodiscard]] const Tensor& get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& ar);
/// Throws MissingInput for absent files and std::runtime_error for
/// truncated or foreign files.
Archive load_archive(const std::filesystem::path& path);

/// 64-bit FNV-1a digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

/// Same digest over an in-memory byte string.
std::string bytes_digest(std::string_view bytes);

}  // namespace refusion::io
