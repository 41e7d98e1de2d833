#include "fbtc/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fbtc {

namespace {
constexpr double kPi = 3.1415926535897932384626433832795;
}

RandomCpData gen_random_cp(const std::vector<int>& dims, int rank, std::uint64_t seed) {
    if (rank < 1) throw std::invalid_argument("gen_random_cp: rank must be positive");
    for (int d : dims)
        if (d < 1) throw std::invalid_argument("gen_random_cp: dims must be positive");
    Rng rng(seed);
    RandomCpData out;
    out.factors.U.resize(dims.size());
    for (size_t k = 0; k < dims.size(); ++k) {
        Eigen::MatrixXd& u = out.factors.U[k];
        u.resize(dims[k], rank);
        for (int i = 0; i < dims[k]; ++i)
            for (int r = 0; r < rank; ++r) u(i, r) = rng.normal();
    }
    out.truth = cp_reconstruct(out.factors, dims);
    return out;
}

double continuous_factor(int mode, double x) {
    switch (mode) {
        case 0: {
            const double s = std::sin(2 * kPi * x);
            return s * s * std::cos(2 * kPi * x);
        }
        case 1: {
            const double s = std::sin(kPi * x / 2);
            return std::sin(kPi * x / 4) * (1 - s * s * s);
        }
        case 2: return std::exp(-2 * x) * std::sin(3 * kPi * x / 2);
        default: throw std::invalid_argument("continuous_factor: mode out of range");
    }
}

ContinuousData gen_continuous(const std::vector<int>& dims, std::uint64_t seed) {
    if (dims.size() != 3) throw std::invalid_argument("gen_continuous: exactly 3 modes required");
    Rng rng(seed);
    ContinuousData out;
    out.coords.resize(3);
    for (int k = 0; k < 3; ++k) {
        out.coords[k].resize(static_cast<size_t>(dims[k]));
        for (double& c : out.coords[k]) c = rng.uniform01();
        std::sort(out.coords[k].begin(), out.coords[k].end());
    }
    CpFactors f;
    f.U.resize(3);
    for (int k = 0; k < 3; ++k) {
        f.U[k].resize(dims[k], 1);
        for (int i = 0; i < dims[k]; ++i)
            f.U[k](i, 0) = continuous_factor(k, out.coords[k][static_cast<size_t>(i)]);
    }
    out.truth = cp_reconstruct(f, dims);
    return out;
}

DenseTensor add_noise_snr(const DenseTensor& truth, double snr_db, std::uint64_t seed) {
    const double fro2 = truth.frob_norm() * truth.frob_norm();
    if (fro2 == 0.0) throw std::invalid_argument("add_noise_snr: zero truth tensor");
    const double t = static_cast<double>(truth.size());
    const double sigma = std::sqrt(fro2 / (t * std::pow(10.0, snr_db / 10.0)));
    Rng rng(seed);
    DenseTensor out = truth;
    for (double& v : out.values) v += sigma * rng.normal();
    return out;
}

MaskTensor sample_mask(const std::vector<int>& dims, double sr, std::uint64_t seed) {
    if (!(sr > 0.0 && sr <= 1.0)) throw std::invalid_argument("sample_mask: sr must be in (0,1]");
    MaskTensor mask(dims);
    const std::int64_t t = static_cast<std::int64_t>(mask.flags.size());
    const std::int64_t n = std::llround(sr * static_cast<double>(t));
    if (n >= t) {
        std::fill(mask.flags.begin(), mask.flags.end(), 1);
        return mask;
    }
    // Partial Fisher-Yates: the first n slots end up a uniform sample.
    std::vector<std::int64_t> cells(static_cast<size_t>(t));
    std::iota(cells.begin(), cells.end(), 0);
    Rng rng(seed);
    for (std::int64_t j = 0; j < n; ++j) {
        const std::int64_t pick =
            j + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t - j)));
        std::swap(cells[static_cast<size_t>(j)], cells[static_cast<size_t>(pick)]);
        mask.flags[static_cast<size_t>(cells[static_cast<size_t>(j)])] = 1;
    }
    return mask;
}

}  // namespace fbtc
