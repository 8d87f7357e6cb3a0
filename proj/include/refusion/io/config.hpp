// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat key=value configuration. Keys are qualified by section, either with
// a "[section]" header or a "section.key" prefix; '#' starts a comment.
//
//   [train]
//   iterations = 5000
//   sde.noise_level = 50

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace refusion::io {

class Config {
 public:
  Config() = default;

  /// Throws ConfigError with `origin` and the line number on syntax errors.
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  /// Throws MissingInput when the file does not exist.
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  /// Applies "section.key=value".
  void apply_override(std::string_view assignment);
  /// Copies every entry of `other` over this one. Unless `allow_new`, keys
  /// not already present are rejected as unknown.
  void merge(const Config& other, bool allow_new = false);

  [[nodiscard]] bool has(const std::string& key) const;
  [[nodiscard]] const std::string& raw(const std::string& key) const;
  [[nodiscard]] std::string str(const std::string& key) const { return raw(key); }
  [[nodiscard]] double real(const std::string& key) const;
  [[nodiscard]] int integer(const std::string& key) const;
  [[nodiscard]] std::uint64_t u64(const std::string& key) const;
  [[nodiscard]] bool boolean(const std::string& key) const;
  /// Comma-separated integers; an empty value is an empty list.
  [[nodiscard]] std::vector<int> int_list(const std::string& key) const;
  [[nodiscard]] std::vector<double> real_list(const std::string& key) const;

  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return kv_; }
  /// Entries under "prefix." with the prefix stripped.
  [[nodiscard]] std::map<std::string, std::string> section(const std::string& prefix) const;

  /// Sorted "key = value" lines grouped by section; parse(dump()) == *this.
  [[nodiscard]] std::string dump() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);

  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace refusion::io
