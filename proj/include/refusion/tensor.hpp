// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refusion {

/// NCHW extent of a rank-4 array.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense rank-4 array of doubles in NCHW order.
///
/// Used both for image batches (values nominally in [0,1]) and for
/// intermediate feature maps inside the networks.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor like(const Tensor& other, double fill = 0.0) {
    return Tensor(other.shape(), fill);
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<double> values() { return data_; }
  [[nodiscard]] std::span<const double> values() const { return data_; }
  [[nodiscard]] double* data() { return data_.data(); }
  [[nodiscard]] const double* data() const { return data_.data(); }

  // Pointer to the H*W plane of (sample, channel).
  [[nodiscard]] double* plane(int n, int c) {
    return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane();
  }
  [[nodiscard]] const double* plane(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane();
  }
  // Pointer to the C*H*W block of one sample.
  [[nodiscard]] double* sample(int n) {
    return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane();
  }
  [[nodiscard]] const double* sample(int n) const {
    return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane();
  }

  double& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  [[nodiscard]] double at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v);
  // Reinterpret with a new shape of equal element count.
  void reshape(Shape s);

  // Slice out samples [first, first+count) as a new tensor.
  [[nodiscard]] Tensor batch_slice(int first, int count) const;
  // Copy `src` (batch 1 or matching) into sample slot `n`.
  void set_sample(int n, const Tensor& src, int src_n = 0);

  [[nodiscard]] bool all_finite() const;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator-=(const Tensor& o);
  Tensor& operator*=(double s);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<double> data_;
};

using ImageBatch = Tensor;
using FeatureMap = Tensor;

/// Throws std::invalid_argument naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Channel concatenation of two tensors with equal N, H, W.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits channels [0, first) and [first, C) into two tensors.
void split_channels(const Tensor& src, int first, Tensor& a, Tensor& b);

/// Clamp every element into [lo, hi].
Tensor clamped(const Tensor& t, double lo = 0.0, double hi = 1.0);

}  // namespace refusion
