// SPDX-License-Identifier: Apache-2.0
#pragma once

// Distortion metrics on images in [0,1]. Batched inputs are reduced over all
// samples (PSNR/RMSE over all pixels, SSIM averaged over samples).

#include "refusion/tensor.hpp"

namespace refusion::metrics {

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kPsnrCapMse = 1e-10;

double mse(const Tensor& a, const Tensor& b);

/// 10 log10(1 / MSE), capped at kPsnrCap when MSE < 1e-10.
double psnr(const Tensor& a, const Tensor& b);

/// Root mean squared error on the 0-255 scale, over all channels (RGB).
double rmse(const Tensor& a, const Tensor& b);

enum class SsimWindow { gaussian, uniform };

struct SsimOptions {
  int window = 11;
  SsimWindow kind = SsimWindow::gaussian;
  double sigma = 1.5;  // gaussian only
};

/// Mean local SSIM over the luma channel (valid windows only), with
/// C1 = 0.01^2 and C2 = 0.03^2. Rejects images smaller than the window.
double ssim(const Tensor& a, const Tensor& b, SsimOptions opt = {});

/// ITU-R BT.601 luma of RGB samples; single-channel input is returned as is.
Tensor luma(const Tensor& img);

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
};

MetricReport evaluate(const Tensor& pred, const Tensor& ref);

}  // namespace refusion::metrics
