#pragma once

#include "fbtc/tensor.hpp"

namespace fbtc {

double rmse(const DenseTensor& truth, const DenseTensor& estimate);

// ||truth - estimate||_F / ||truth||_F; errors on zero-norm truth.
double rrse(const DenseTensor& truth, const DenseTensor& estimate);

// 10 log10(peak^2 / mse), capped at 100 dB for identical inputs.
double psnr(const DenseTensor& truth, const DenseTensor& estimate, double peak);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid-region stride 1,
// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2. Accepts HxW or HxWx3 tensors
// (channels scored separately and averaged). Both spatial dims must be >= 11.
double ssim(const DenseTensor& truth, const DenseTensor& estimate, double peak);

}  // namespace fbtc
