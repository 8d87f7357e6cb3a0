// SPDX-License-Identifier: Apache-2.0
#include "refusion/io/archive.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "refusion/errors.hpp"

namespace refusion::io {

namespace {

constexpr std::array<char, 8> kMagic{'R', 'F', 'N', 'A', 'R', 'C', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_value(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated archive " + path.string());
  }
  return v;
}

void put_string(std::ofstream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& in, const std::filesystem::path& path) {
  const auto n = get_value<std::uint64_t>(in, path);
  if (n > (1ULL << 32)) throw std::runtime_error("corrupt string length in " + path.string());
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw std::runtime_error("truncated archive " + path.string());
  }
  return s;
}

}  // namespace

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ConfigError("archive has no tensor named '" + name + "'");
}

bool Archive::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void save_archive(const std::filesystem::path& path, const Archive& ar) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling temp file and rename, so an interrupted save never
  // leaves a half-written archive under the final name.
  const std::filesystem::path tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put_string(out, ar.manifest.dump());
    put<std::uint64_t>(out, ar.tensors.size());
    for (const auto& t : ar.tensors) {
      put_string(out, t.name);
      const Shape& s = t.value.shape();
      for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingInput("no such archive: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot open " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error(path.string() + " is not a tensor archive");
  }
  Archive ar;
  ar.manifest = nlohmann::json::parse(get_string(in, path));
  const auto count = get_value<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = get_string(in, path);
    Shape s;
    s.n = get_value<std::int32_t>(in, path);
    s.c = get_value<std::int32_t>(in, path);
    s.h = get_value<std::int32_t>(in, path);
    s.w = get_value<std::int32_t>(in, path);
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw std::runtime_error("corrupt shape in " + path.string());
    }
    t.value = Tensor(s);
    if (!in.read(reinterpret_cast<char*>(t.value.data()),
                 static_cast<std::streamsize>(t.value.size() * sizeof(double)))) {
      throw std::runtime_error("truncated archive " + path.string());
    }
    ar.tensors.push_back(std::move(t));
  }
  return ar;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

void fnv_update(std::uint64_t& h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
}

std::string hex16(std::uint64_t h) {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot open " + path.string());
  std::uint64_t h = kFnvOffset;
  std::array<char, 1 << 16> buf{};
  while (in.read(buf.data(), buf.size()) || in.gcount() > 0) {
    fnv_update(h, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return hex16(h);
}

std::string bytes_digest(std::string_view bytes) {
  std::uint64_t h = kFnvOffset;
  fnv_update(h, bytes.data(), bytes.size());
  return hex16(h);
}

}  // namespace refusion::io
