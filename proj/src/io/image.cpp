// SPDX-License-Identifier: Apache-2.0
#include "refusion/io/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

#include "refusion/errors.hpp"

namespace refusion::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw MissingInput("cannot open image " + path.string());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_stdio(&image, f.get()) == 0) {
    throw std::runtime_error("not a readable PNG: " + path.string() + " (" + image.message + ")");
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr) == 0) {
    png_image_free(&image);
    throw std::runtime_error("failed to decode " + path.string() + " (" + image.message + ")");
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor out({1, 3, h, w});
  for (int c = 0; c < 3; ++c) {
    double* dst = out.plane(0, c);
    for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
      dst[i] = buf[i * 3 + c] / 255.0;
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& img, int n) {
  const Shape& s = img.shape();
  if (s.c != 1 && s.c != 3) throw std::invalid_argument("write_png expects 1 or 3 channels");
  if (n < 0 || n >= s.n) throw std::out_of_range("write_png sample index");
  const std::size_t np = s.plane();
  std::vector<std::uint8_t> buf(np * 3);
  for (int c = 0; c < 3; ++c) {
    const double* src = img.plane(n, s.c == 1 ? 0 : c);
    for (std::size_t i = 0; i < np; ++i) buf[i * 3 + c] = to_byte(src[i]);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(s.w);
  image.height = static_cast<png_uint_32>(s.h);
  image.format = PNG_FORMAT_RGB;
  if (png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr) == 0) {
    throw std::runtime_error("failed to write " + path.string() + " (" + image.message + ")");
  }
}

Tensor quantize8(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.values()) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace refusion::io
