#include "fbtc/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace fbtc {

namespace {

void check_dims(const DenseTensor& a, const DenseTensor& b, const char* who) {
    if (a.dims != b.dims) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

double mse(const DenseTensor& a, const DenseTensor& b) {
    double s = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return s / static_cast<double>(a.values.size());
}

// One-channel SSIM over H x W data at the given element strides.
double ssim_channel(const double* x, const double* y, int h, int w, std::int64_t rstride,
                    std::int64_t cstride, std::int64_t offset, double c1, double c2) {
    constexpr int win = 11;
    double g[win];
    double gsum = 0;
    for (int i = 0; i < win; ++i) {
        const double d = i - 5.0;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;

    double total = 0;
    std::int64_t count = 0;
    for (int r0 = 0; r0 + win <= h; ++r0)
        for (int c0 = 0; c0 + win <= w; ++c0) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double wgt = g[i] * g[j];
                    const std::int64_t p = (r0 + i) * rstride + (c0 + j) * cstride + offset;
                    const double xv = x[p], yv = y[p];
                    mx += wgt * xv;
                    my += wgt * yv;
                    sxx += wgt * xv * xv;
                    syy += wgt * yv * yv;
                    sxy += wgt * xv * yv;
                }
            sxx -= mx * mx;
            syy -= my * my;
            sxy -= mx * my;
            total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                     ((mx * mx + my * my + c1) * (sxx + syy + c2));
            ++count;
        }
    if (count == 0) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    return total / static_cast<double>(count);
}

}  // namespace

double rmse(const DenseTensor& truth, const DenseTensor& estimate) {
    check_dims(truth, estimate, "rmse");
    return std::sqrt(mse(truth, estimate));
}

double rrse(const DenseTensor& truth, const DenseTensor& estimate) {
    check_dims(truth, estimate, "rrse");
    const double denom = truth.frob_norm();
    if (denom == 0.0) throw std::invalid_argument("rrse: zero-norm truth");
    double s = 0;
    for (size_t i = 0; i < truth.values.size(); ++i) {
        const double d = truth.values[i] - estimate.values[i];
        s += d * d;
    }
    return std::sqrt(s) / denom;
}

double psnr(const DenseTensor& truth, const DenseTensor& estimate, double peak) {
    check_dims(truth, estimate, "psnr");
    if (peak <= 0) throw std::invalid_argument("psnr: peak must be positive");
    const double m = mse(truth, estimate);
    const double db = m == 0.0 ? 100.0 : 10.0 * std::log10(peak * peak / m);
    return std::min(db, 100.0);
}

double ssim(const DenseTensor& truth, const DenseTensor& estimate, double peak) {
    check_dims(truth, estimate, "ssim");
    if (peak <= 0) throw std::invalid_argument("ssim: peak must be positive");
    const bool rgb = truth.order() == 3 && truth.dims[2] == 3;
    if (!(truth.order() == 2 || rgb))
        throw std::invalid_argument("ssim: expects HxW or HxWx3");
    const int h = truth.dims[0], w = truth.dims[1];
    const double c1 = 0.01 * peak * 0.01 * peak;
    const double c2 = 0.03 * peak * 0.03 * peak;
    if (!rgb)
        return ssim_channel(truth.values.data(), estimate.values.data(), h, w, w, 1, 0, c1, c2);
    double s = 0;
    for (int ch = 0; ch < 3; ++ch)
        s += ssim_channel(truth.values.data(), estimate.values.data(), h, w,
                          static_cast<std::int64_t>(w) * 3, 3, ch, c1, c2);
    return s / 3.0;
}

}  // namespace fbtc
