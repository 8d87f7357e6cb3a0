// SPDX-License-Identifier: Apache-2.0
#include "refusion/io/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "refusion/errors.hpp"

namespace refusion::io {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const std::string t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a valid number");
  }
  return out;
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    cfg.kv_[key] = trim(t.substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, std::string value) { kv_[key] = std::move(value); }

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
  kv_[key] = trim(assignment.substr(eq + 1));
}

void Config::merge(const Config& other, bool allow_new) {
  for (const auto& [k, v] : other.kv_) {
    if (!allow_new && !has(k)) throw ConfigError("unknown config key '" + k + "'");
    kv_[k] = v;
  }
}

bool Config::has(const std::string& key) const { return kv_.count(key) != 0; }

const std::string& Config::raw(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

double Config::real(const std::string& key) const { return parse_number<double>(key, raw(key)); }

int Config::integer(const std::string& key) const { return parse_number<int>(key, raw(key)); }

std::uint64_t Config::u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, raw(key));
}

bool Config::boolean(const std::string& key) const {
  const std::string& v = raw(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<int> Config::int_list(const std::string& key) const {
  std::vector<int> out;
  for (const auto& item : split_commas(raw(key))) out.push_back(parse_number<int>(key, item));
  return out;
}

std::vector<double> Config::real_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_commas(raw(key))) out.push_back(parse_number<double>(key, item));
  return out;
}

std::map<std::string, std::string> Config::section(const std::string& prefix) const {
  std::map<std::string, std::string> out;
  const std::string p = prefix + ".";
  for (const auto& [k, v] : kv_) {
    if (k.compare(0, p.size(), p) == 0) out[k.substr(p.size())] = v;
  }
  return out;
}

std::string Config::dump() const {
  std::ostringstream out;
  // Unsectioned keys must precede the first header to read back unchanged.
  for (const auto& [k, v] : kv_) {
    if (k.find('.') == std::string::npos) out << k << " = " << v << "\n";
  }
  std::string current;
  for (const auto& [k, v] : kv_) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) continue;
    const std::string sec = k.substr(0, dot);
    if (sec != current) {
      out << "\n[" << sec << "]\n";
      current = sec;
    }
    // Keys with further dots keep their full name so the section is not
    // prepended twice when read back.
    const std::string rest = k.substr(dot + 1);
    out << (rest.find('.') != std::string::npos ? k : rest) << " = " << v << "\n";
  }
  return out.str();
}

nlohmann::json Config::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : kv_) j[k] = v;
  return j;
}

Config Config::from_json(const nlohmann::json& j) {
  Config cfg;
  for (const auto& [k, v] : j.items()) cfg.kv_[k] = v.get<std::string>();
  return cfg;
}

}  // namespace refusion::io
