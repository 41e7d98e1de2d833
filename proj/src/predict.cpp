#include "fbtc/predict.hpp"

#include "fbtc/errors.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace fbtc {

namespace {

// Factor of Ktt + s2*I with the kernels module's escalation policy.
Eigen::LLT<Eigen::MatrixXd> train_factor(const GramMatrix& g, double sigma2) {
    const int n = static_cast<int>(g.sigma.rows());
    const double meandiag = g.sigma.diagonal().mean();
    Eigen::MatrixXd a = g.sigma;
    a.diagonal().array() += sigma2;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    double extra = 1e-8 * meandiag;
    while (llt.info() != Eigen::Success && extra <= 1e-2 * meandiag) {
        Eigen::MatrixXd b = a;
        b.diagonal().array() += extra;
        llt.compute(b);
        extra *= 10.0;
    }
    if (llt.info() != Eigen::Success)
        throw NumericalError("predict: training kernel matrix not positive definite");
    return llt;
}

void check_query(const FitState& state, const QuerySet& query) {
    const int K = state.order();
    if (query.indices.empty()) throw std::invalid_argument("predict: empty query");
    for (const auto& q : query.indices) {
        if (static_cast<int>(q.size()) != K)
            throw std::invalid_argument("predict: query dimensionality mismatch");
        for (double v : q)
            if (!std::isfinite(v)) throw std::invalid_argument("predict: non-finite query index");
    }
}

}  // namespace

FactorPrediction predict_factors(const FitState& state, const QuerySet& query, double sigma2) {
    check_query(state, query);
    if (sigma2 < 0) throw std::invalid_argument("predict: negative noise variance");
    const int K = state.order();
    const int M = query.count();

    FactorPrediction out;
    out.mean.resize(K);
    out.cov.resize(K);
    out.omega.resize(state.rank);
    for (int r = 0; r < state.rank; ++r) out.omega(r) = 1.0 / state.hypers.e_gamma(r);

    for (int k = 0; k < K; ++k) {
        const KernelSpec spec = state.config.kernel_for_mode(k);
        std::vector<double> test(M);
        for (int m = 0; m < M; ++m) test[m] = query.indices[m][static_cast<size_t>(k)];

        const Eigen::LLT<Eigen::MatrixXd> llt = train_factor(state.grams[k], sigma2);
        const Eigen::MatrixXd kxt = cross_gram(spec, state.grid.coord_sets[k], test);

        out.mean[k] = kxt.transpose() * llt.solve(state.factors.mean[k]);

        Eigen::MatrixXd kxx(M, M);
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < M; ++j) kxx(i, j) = kernel_eval(spec, test[i], test[j]);
        Eigen::MatrixXd cov = kxx - kxt.transpose() * llt.solve(kxt);
        cov.diagonal().array() += sigma2;
        cov = 0.5 * (cov + cov.transpose()).eval();
        for (int i = 0; i < M; ++i)
            if (cov(i, i) < 0) cov(i, i) = 0;
        out.cov[k] = std::move(cov);
    }
    return out;
}

std::vector<double> predict_values(const FitState& state, const QuerySet& query, double sigma2) {
    check_query(state, query);
    if (sigma2 < 0) throw std::invalid_argument("predict: negative noise variance");
    const int K = state.order();
    const int M = query.count();
    const int R = state.rank;

    std::vector<double> out(static_cast<size_t>(M), 0.0);
    if (R == 0) return out;

    // Per mode: predicted means at the distinct query coordinates only.
    std::vector<Eigen::MatrixXd> umean(K);
    std::vector<std::vector<int>> row_of(K, std::vector<int>(M));
    for (int k = 0; k < K; ++k) {
        std::map<double, int> pos;
        std::vector<double> uniq;
        for (int m = 0; m < M; ++m) {
            const double c = query.indices[m][static_cast<size_t>(k)];
            auto [it, fresh] = pos.emplace(c, static_cast<int>(uniq.size()));
            if (fresh) uniq.push_back(c);
            row_of[k][m] = it->second;
        }
        const Eigen::LLT<Eigen::MatrixXd> llt = train_factor(state.grams[k], sigma2);
        const Eigen::MatrixXd kxt =
            cross_gram(state.config.kernel_for_mode(k), state.grid.coord_sets[k], uniq);
        umean[k] = kxt.transpose() * llt.solve(state.factors.mean[k]);
    }

    for (int m = 0; m < M; ++m) {
        double s = 0;
        for (int r = 0; r < R; ++r) {
            double p = 1;
            for (int k = 0; k < K; ++k) p *= umean[k](row_of[k][m], r);
            s += p;
        }
        out[static_cast<size_t>(m)] = s;
    }
    return out;
}

std::vector<Eigen::VectorXd> predictive_std(const FactorPrediction& pred, int row) {
    const int K = static_cast<int>(pred.mean.size());
    const int R = static_cast<int>(pred.omega.size());
    std::vector<Eigen::VectorXd> out(K);
    for (int k = 0; k < K; ++k) {
        const double v = std::max(0.0, pred.cov[k](row, row));
        out[k].resize(R);
        for (int r = 0; r < R; ++r) out[k](r) = std::sqrt(v * pred.omega(r));
    }
    return out;
}

}  // namespace fbtc
