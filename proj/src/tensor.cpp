// SPDX-License-Identifier: Apache-2.0
#include "refusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "refusion/simd/kernels.hpp"

namespace refusion {

std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw std::invalid_argument("negative tensor extent " + shape.str());
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel()) {
    throw std::invalid_argument("value count does not match shape " + shape.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape s) {
  if (s.numel() != data_.size()) {
    throw std::invalid_argument("reshape " + shape_.str() + " -> " + s.str());
  }
  shape_ = s;
}

Tensor Tensor::batch_slice(int first, int count) const {
  if (first < 0 || count < 0 || first + count > shape_.n) {
    throw std::out_of_range("batch slice out of range");
  }
  Tensor out({count, shape_.c, shape_.h, shape_.w});
  const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
  std::copy_n(data_.data() + first * per, count * per, out.data());
  return out;
}

void Tensor::set_sample(int n, const Tensor& src, int src_n) {
  if (src.shape_.c != shape_.c || src.shape_.h != shape_.h || src.shape_.w != shape_.w) {
    throw std::invalid_argument("set_sample shape mismatch " + src.shape_.str() + " into " +
                                shape_.str());
  }
  const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
  std::copy_n(src.sample(src_n), per, sample(n));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& o) {
  require_same_shape(*this, o, "tensor +=");
  simd::active().axpy(data_.size(), 1.0, o.data(), data());
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
  require_same_shape(*this, o, "tensor -=");
  simd::active().axpy(data_.size(), -1.0, o.data(), data());
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  simd::active().scale(data_.size(), s, data());
  return *this;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape().str() +
                                " vs " + b.shape().str());
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw std::invalid_argument("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor out({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t pb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.sample(n), pa, out.sample(n));
    std::copy_n(b.sample(n), pb, out.sample(n) + pa);
  }
  return out;
}

void split_channels(const Tensor& src, int first, Tensor& a, Tensor& b) {
  const Shape& s = src.shape();
  if (first < 0 || first > s.c) throw std::invalid_argument("split_channels: bad split");
  a = Tensor({s.n, first, s.h, s.w});
  b = Tensor({s.n, s.c - first, s.h, s.w});
  const std::size_t pa = static_cast<std::size_t>(first) * s.plane();
  const std::size_t pb = static_cast<std::size_t>(s.c - first) * s.plane();
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(src.sample(n), pa, a.sample(n));
    std::copy_n(src.sample(n) + pa, pb, b.sample(n));
  }
}

Tensor clamped(const Tensor& t, double lo, double hi) {
  Tensor out = t;
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  return out;
}

}  // namespace refusion
