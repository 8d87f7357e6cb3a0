// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "refusion/tensor.hpp"

namespace refusion::io {

/// Reads an 8-bit (or 16-bit) PNG as a [1, 3, H, W] tensor in [0,1].
/// Grey and alpha channels are converted to RGB.
Tensor read_png(const std::filesystem::path& path);

/// Writes sample `n` of a 1- or 3-channel tensor as an 8-bit PNG, clamping
/// to [0,1] and rounding to the nearest level.
void write_png(const std::filesystem::path& path, const Tensor& img, int n = 0);

/// Quantises to 8-bit levels exactly as write_png would.
Tensor quantize8(const Tensor& img);

}  // namespace refusion::io
