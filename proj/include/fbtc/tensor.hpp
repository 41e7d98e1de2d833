#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fbtc {

// Dense multiway array. Flat storage is lexicographic with the LAST mode
// index varying fastest (C order). This fixes the unfolding and Khatri-Rao
// column conventions used throughout.
struct DenseTensor {
    std::vector<int> dims;
    std::vector<double> values;

    DenseTensor() = default;
    explicit DenseTensor(std::vector<int> d) : dims(std::move(d)) {
        values.assign(static_cast<size_t>(size()), 0.0);
    }

    int order() const { return static_cast<int>(dims.size()); }

    std::int64_t size() const {
        std::int64_t t = 1;
        for (int d : dims) t *= d;
        return t;
    }

    std::int64_t flat_index(const std::vector<int>& idx) const {
        std::int64_t f = 0;
        for (size_t k = 0; k < dims.size(); ++k) f = f * dims[k] + idx[k];
        return f;
    }

    double& at(const std::vector<int>& idx) { return values[flat_index(idx)]; }
    double at(const std::vector<int>& idx) const { return values[flat_index(idx)]; }

    double frob_norm() const {
        double s = 0;
        for (double v : values) s += v * v;
        return std::sqrt(s);
    }
};

struct MaskTensor {
    std::vector<int> dims;
    std::vector<std::uint8_t> flags;

    MaskTensor() = default;
    explicit MaskTensor(std::vector<int> d) : dims(std::move(d)) {
        std::int64_t t = 1;
        for (int x : dims) t *= x;
        flags.assign(static_cast<size_t>(t), 0);
    }

    std::int64_t count() const {
        std::int64_t c = 0;
        for (auto f : flags) c += f;
        return c;
    }
};

struct CpFactors {
    std::vector<Eigen::MatrixXd> U;  // per mode, N_k x R

    int rank() const { return U.empty() ? 0 : static_cast<int>(U[0].cols()); }
    int order() const { return static_cast<int>(U.size()); }
};

// Mode-k unfolding (k is 0-based). Column index runs over the remaining
// modes with the lowest-numbered mode varying fastest, so that
// unfold(cp_reconstruct(F), k) == U^k * khatri_rao(U^{K-1},..,skip k,..,U^0)^T.
Eigen::MatrixXd unfold(const DenseTensor& t, int mode);

DenseTensor fold(const Eigen::MatrixXd& m, int mode, const std::vector<int>& dims);

// Khatri-Rao product of the listed matrices (shared column count). The LAST
// matrix in the list has the fastest-varying row index.
Eigen::MatrixXd khatri_rao(const std::vector<Eigen::MatrixXd>& mats);

DenseTensor cp_reconstruct(const CpFactors& f, const std::vector<int>& dims);

double masked_sq_norm(const DenseTensor& t, const MaskTensor& mask);

}  // namespace fbtc
