#include "fbtc/tensor.hpp"

namespace fbtc {

Eigen::MatrixXd unfold(const DenseTensor& t, int mode) {
    const int K = t.order();
    if (mode < 0 || mode >= K) throw std::out_of_range("unfold: mode out of range");
    const std::int64_t rows = t.dims[mode];
    const std::int64_t cols = t.size() / rows;
    Eigen::MatrixXd out(rows, cols);

    // Strides of the flat (last-fastest) layout and of the unfolding column
    // space (mode 0 fastest among the remaining modes).
    std::vector<std::int64_t> fstride(K);
    fstride[K - 1] = 1;
    for (int k = K - 2; k >= 0; --k) fstride[k] = fstride[k + 1] * t.dims[k + 1];
    std::vector<std::int64_t> cstride(K, 0);
    std::int64_t s = 1;
    for (int k = 0; k < K; ++k) {
        if (k == mode) continue;
        cstride[k] = s;
        s *= t.dims[k];
    }

    std::vector<int> idx(K, 0);
    const std::int64_t total = t.size();
    for (std::int64_t f = 0; f < total; ++f) {
        std::int64_t col = 0;
        for (int k = 0; k < K; ++k)
            if (k != mode) col += idx[k] * cstride[k];
        out(idx[mode], col) = t.values[f];
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[k] < t.dims[k]) break;
            idx[k] = 0;
        }
    }
    return out;
}

DenseTensor fold(const Eigen::MatrixXd& m, int mode, const std::vector<int>& dims) {
    DenseTensor t(dims);
    const int K = t.order();
    if (mode < 0 || mode >= K) throw std::out_of_range("fold: mode out of range");
    std::vector<std::int64_t> cstride(K, 0);
    std::int64_t s = 1;
    for (int k = 0; k < K; ++k) {
        if (k == mode) continue;
        cstride[k] = s;
        s *= dims[k];
    }
    std::vector<int> idx(K, 0);
    const std::int64_t total = t.size();
    for (std::int64_t f = 0; f < total; ++f) {
        std::int64_t col = 0;
        for (int k = 0; k < K; ++k)
            if (k != mode) col += idx[k] * cstride[k];
        t.values[f] = m(idx[mode], col);
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[k] < dims[k]) break;
            idx[k] = 0;
        }
    }
    return t;
}

Eigen::MatrixXd khatri_rao(const std::vector<Eigen::MatrixXd>& mats) {
    if (mats.empty()) throw std::invalid_argument("khatri_rao: empty input");
    const auto R = mats[0].cols();
    std::int64_t rows = 1;
    for (const auto& m : mats) {
        if (m.cols() != R) throw std::invalid_argument("khatri_rao: column counts differ");
        rows *= m.rows();
    }
    Eigen::MatrixXd out = mats[0];
    for (size_t i = 1; i < mats.size(); ++i) {
        const Eigen::MatrixXd& b = mats[i];
        Eigen::MatrixXd next(out.rows() * b.rows(), R);
        for (Eigen::Index r = 0; r < R; ++r)
            for (Eigen::Index p = 0; p < out.rows(); ++p)
                for (Eigen::Index q = 0; q < b.rows(); ++q)
                    next(p * b.rows() + q, r) = out(p, r) * b(q, r);
        out = std::move(next);
    }
    return out;
}

DenseTensor cp_reconstruct(const CpFactors& f, const std::vector<int>& dims) {
    DenseTensor t(dims);
    const int K = t.order();
    const int R = f.rank();
    std::vector<int> idx(K, 0);
    const std::int64_t total = t.size();
    for (std::int64_t p = 0; p < total; ++p) {
        double s = 0;
        for (int r = 0; r < R; ++r) {
            double prod = 1;
            for (int k = 0; k < K; ++k) prod *= f.U[k](idx[k], r);
            s += prod;
        }
        t.values[p] = s;
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[k] < dims[k]) break;
            idx[k] = 0;
        }
    }
    return t;
}

double masked_sq_norm(const DenseTensor& t, const MaskTensor& mask) {
    if (t.dims != mask.dims) throw std::invalid_argument("masked_sq_norm: dim mismatch");
    double s = 0;
    for (size_t i = 0; i < t.values.size(); ++i)
        if (mask.flags[i]) s += t.values[i] * t.values[i];
    return s;
}

}  // namespace fbtc
