#pragma once

#include "fbtc/rng.hpp"
#include "fbtc/tensor.hpp"

namespace fbtc {

struct RandomCpData {
    CpFactors factors;
    DenseTensor truth;
};

// Factor entries i.i.d. standard normal; truth is their CP reconstruction.
RandomCpData gen_random_cp(const std::vector<int>& dims, int rank, std::uint64_t seed);

// The fixed three-mode test function, one factor per mode:
//   mode 0: sin^2(2 pi x) cos(2 pi x)
//   mode 1: sin(pi y / 4) (1 - sin^3(pi y / 2))
//   mode 2: exp(-2 z) sin(3 pi z / 2)
double continuous_factor(int mode, double x);

struct ContinuousData {
    std::vector<std::vector<double>> coords;  // per mode, sorted ascending
    DenseTensor truth;
};

// Coordinates sampled uniformly on [0,1] per mode (sorted); entries are the
// product of the three mode functions. Requires exactly 3 dims.
ContinuousData gen_continuous(const std::vector<int>& dims, std::uint64_t seed);

// Adds i.i.d. Gaussian noise with variance ||X||_F^2 / (T 10^(snr_db/10)).
DenseTensor add_noise_snr(const DenseTensor& truth, double snr_db, std::uint64_t seed);

// Exactly round(sr * T) cells flagged, uniform without replacement.
MaskTensor sample_mask(const std::vector<int>& dims, double sr, std::uint64_t seed);

}  // namespace fbtc
