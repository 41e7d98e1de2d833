#include "fbtc/vi.hpp"

#include "fbtc/rng.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>

namespace fbtc {

namespace {

constexpr double kDeadPowerRatio = 1e-12;

double digamma(double x) {
    // Recurrence up to the asymptotic regime, then the standard expansion.
    double r = 0.0;
    while (x < 6.0) {
        r -= 1.0 / x;
        x += 1.0;
    }
    const double f = 1.0 / (x * x);
    return r + std::log(x) - 0.5 / x -
           f * (1.0 / 12.0 - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f / 132.0))));
}

double gamma_entropy(double a, double b) {
    return a - std::log(b) + std::lgamma(a) + (1.0 - a) * digamma(a);
}

// Contract every mode except k with the given unit vectors.
Eigen::VectorXd contract_except(const std::vector<double>& flat, const std::vector<int>& dims,
                                const std::vector<Eigen::VectorXd>& us, int mode) {
    const int K = static_cast<int>(dims.size());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dims[mode]);
    std::vector<int> idx(K, 0);
    const std::int64_t total = static_cast<std::int64_t>(flat.size());
    for (std::int64_t f = 0; f < total; ++f) {
        double w = flat[f];
        if (w != 0.0) {
            for (int l = 0; l < K; ++l)
                if (l != mode) w *= us[l](idx[l]);
            out(idx[mode]) += w;
        }
        for (int k2 = K - 1; k2 >= 0; --k2) {
            if (++idx[k2] < dims[k2]) break;
            idx[k2] = 0;
        }
    }
    return out;
}

void init_means_svd(const GriddedData& g, int R, FactorPosterior& f) {
    const int K = g.Y.order();
    for (int k = 0; k < K; ++k) {
        const Eigen::MatrixXd yk = unfold(g.Y, k);
        Eigen::BDCSVD<Eigen::MatrixXd> svd(yk, Eigen::ComputeThinU);
        const int c = std::min<int>(R, static_cast<int>(svd.singularValues().size()));
        f.mean[k].setZero(g.Y.dims[k], R);
        for (int r = 0; r < c; ++r)
            f.mean[k].col(r) = svd.matrixU().col(r) * std::sqrt(svd.singularValues()(r));
    }
}

void init_means_random(const GriddedData& g, int R, std::uint64_t seed, FactorPosterior& f) {
    Rng rng(seed);
    const int K = g.Y.order();
    for (int k = 0; k < K; ++k) {
        f.mean[k].resize(g.Y.dims[k], R);
        for (int r = 0; r < R; ++r)
            for (int i = 0; i < g.Y.dims[k]; ++i) f.mean[k](i, r) = 0.1 * rng.normal();
    }
}

// Greedy rank-1 deflation: power-iterate the zero-filled residual, take the
// least-squares amplitude over the observed cells, deflate, repeat.
void init_means_deflate(const GriddedData& g, int R, std::uint64_t seed, FactorPosterior& f) {
    const int K = g.Y.order();
    const std::vector<int>& dims = g.Y.dims;
    std::vector<double> z = g.Y.values;

    std::vector<std::int64_t> obs;
    for (std::int64_t i = 0; i < g.Y.size(); ++i)
        if (g.O.flags[static_cast<size_t>(i)]) obs.push_back(i);
    std::vector<std::vector<int>> oidx(K, std::vector<int>(obs.size()));
    for (size_t c = 0; c < obs.size(); ++c) {
        std::int64_t rem = obs[c];
        for (int k = K - 1; k >= 0; --k) {
            oidx[k][c] = static_cast<int>(rem % dims[k]);
            rem /= dims[k];
        }
    }

    for (int k = 0; k < K; ++k) f.mean[k].setZero(dims[k], R);
    Rng rng(seed + 7);
    for (int r = 0; r < R; ++r) {
        std::vector<Eigen::VectorXd> us(K);
        for (int k = 0; k < K; ++k) {
            us[k].resize(dims[k]);
            for (int i = 0; i < dims[k]; ++i) us[k](i) = rng.normal();
            us[k].normalize();
        }
        for (int it = 0; it < 12; ++it)
            for (int k = 0; k < K; ++k) {
                Eigen::VectorXd t = contract_except(z, dims, us, k);
                const double n = t.norm();
                if (n > 0) us[k] = t / n;
            }
        double num = 0, den = 0;
        std::vector<double> prod(obs.size());
        for (size_t c = 0; c < obs.size(); ++c) {
            double p = 1;
            for (int k = 0; k < K; ++k) p *= us[k](oidx[k][c]);
            prod[c] = p;
            num += z[static_cast<size_t>(obs[c])] * p;
            den += p * p;
        }
        const double amp = den > 0 ? num / den : 0.0;
        const double scale = std::cbrt(std::abs(amp));
        for (int k = 0; k < K; ++k)
            f.mean[k].col(r) = us[k] * scale * (k == 0 && amp < 0 ? -1.0 : 1.0);
        for (size_t c = 0; c < obs.size(); ++c)
            z[static_cast<size_t>(obs[c])] -= amp * prod[c];
    }
}

double component_log_power(const FactorPosterior& f, int K, int r) {
    double lp = 0;
    for (int k = 0; k < K; ++k) {
        const double n = f.mean[k].col(r).norm();
        if (n == 0.0) return -std::numeric_limits<double>::infinity();
        lp += std::log(n);
    }
    return lp;
}

}  // namespace

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "deflate") return InitScheme::Deflate;
    if (s == "svd") return InitScheme::Svd;
    if (s == "random") return InitScheme::Random;
    throw std::invalid_argument("unknown init scheme: " + s);
}

std::string init_scheme_to_string(InitScheme s) {
    switch (s) {
        case InitScheme::Deflate: return "deflate";
        case InitScheme::Svd: return "svd";
        case InitScheme::Random: return "random";
    }
    return "?";
}

ObsCache build_obs_cache(const GriddedData& g) {
    ObsCache c;
    const int K = g.Y.order();
    const std::vector<int>& dims = g.Y.dims;
    std::vector<std::int64_t> cells;
    for (std::int64_t i = 0; i < g.Y.size(); ++i)
        if (g.O.flags[static_cast<size_t>(i)]) cells.push_back(i);
    c.idx.assign(K, std::vector<int>(cells.size()));
    c.y.resize(static_cast<Eigen::Index>(cells.size()));
    for (size_t n = 0; n < cells.size(); ++n) {
        c.y(static_cast<Eigen::Index>(n)) = g.Y.values[static_cast<size_t>(cells[n])];
        std::int64_t rem = cells[n];
        for (int k = K - 1; k >= 0; --k) {
            c.idx[k][n] = static_cast<int>(rem % dims[k]);
            rem /= dims[k];
        }
    }
    return c;
}

void ObsCache::rebuild_products(const FactorPosterior& f, int rank) {
    const int K = static_cast<int>(idx.size());
    const int n = count();
    P.resize(n, rank);
    for (int r = 0; r < rank; ++r)
        for (int c = 0; c < n; ++c) {
            double p = 1;
            for (int k = 0; k < K; ++k) p *= f.mean[k](idx[k][c], r);
            P(c, r) = p;
        }
    psum = P.rowwise().sum();
}

void ObsCache::refresh_column(const FactorPosterior& f, int r) {
    const int K = static_cast<int>(idx.size());
    const int n = count();
    for (int c = 0; c < n; ++c) {
        double p = 1;
        for (int k = 0; k < K; ++k) p *= f.mean[k](idx[k][c], r);
        psum(c) += p - P(c, r);
        P(c, r) = p;
    }
}

FitState init_state(const GriddedData& g, const ModelConfig& cfg) {
    if (g.O.count() == 0) throw std::invalid_argument("init_state: no observations");
    FitState s;
    s.grid = g;
    s.config = cfg;
    const int K = g.Y.order();

    int max_dim = 0;
    for (int d : g.Y.dims) max_dim = std::max(max_dim, d);
    s.rank = cfg.rank_init <= 0 ? max_dim : cfg.rank_init;

    s.grams.reserve(K);
    for (int k = 0; k < K; ++k) s.grams.push_back(build_gram(cfg.kernel_for_mode(k), g.coord_sets[k]));

    s.factors.mean.resize(K);
    switch (cfg.init) {
        case InitScheme::Svd: init_means_svd(g, s.rank, s.factors); break;
        case InitScheme::Random: init_means_random(g, s.rank, cfg.seed, s.factors); break;
        case InitScheme::Deflate: init_means_deflate(g, s.rank, cfg.seed, s.factors); break;
    }

    s.factors.cov.resize(K);
    s.factors.cov_logdet.resize(K);
    for (int k = 0; k < K; ++k) {
        const int n = g.Y.dims[k];
        s.factors.cov[k].assign(s.rank, Eigen::MatrixXd::Identity(n, n) * 1e-2);
        s.factors.cov_logdet[k].assign(s.rank, n * std::log(1e-2));
    }

    s.hypers.a_gamma = Eigen::VectorXd::Constant(s.rank, cfg.hyper.a_gamma);
    s.hypers.b_gamma = Eigen::VectorXd::Constant(s.rank, cfg.hyper.b_gamma);
    s.hypers.e_gamma = Eigen::VectorXd::Ones(s.rank);
    s.hypers.a_tau = cfg.hyper.a_tau;
    s.hypers.b_tau = cfg.hyper.b_tau;

    double mean = 0, sq = 0;
    std::int64_t n_obs = 0;
    for (std::int64_t i = 0; i < g.Y.size(); ++i)
        if (g.O.flags[static_cast<size_t>(i)]) {
            mean += g.Y.values[static_cast<size_t>(i)];
            ++n_obs;
        }
    mean /= static_cast<double>(n_obs);
    for (std::int64_t i = 0; i < g.Y.size(); ++i)
        if (g.O.flags[static_cast<size_t>(i)]) {
            const double d = g.Y.values[static_cast<size_t>(i)] - mean;
            sq += d * d;
        }
    const double var = sq / static_cast<double>(n_obs);
    s.hypers.e_tau = var > 0 ? 1.0 / var : 1.0;
    return s;
}

void update_factor(FitState& s, ObsCache& cache, int k, int r) {
    const int K = s.order();
    const int nk = s.grid.Y.dims[k];
    const int n = cache.count();
    const double e_tau = s.hypers.e_tau;

    Eigen::VectorXd d = Eigen::VectorXd::Zero(nk);
    Eigen::VectorXd bb = Eigen::VectorXd::Zero(nk);
    for (int c = 0; c < n; ++c) {
        double v = 1, w = 1;
        for (int l = 0; l < K; ++l) {
            if (l == k) continue;
            const int i = cache.idx[l][c];
            const double m = s.factors.mean[l](i, r);
            v *= m * m + s.factors.cov[l][r](i, i);
            w *= m;
        }
        const double resid = cache.y(c) - (cache.psum(c) - cache.P(c, r));
        const int i = cache.idx[k][c];
        d(i) += v;
        bb(i) += resid * w;
    }

    Eigen::MatrixXd lambda = s.hypers.e_gamma(r) * s.grams[k].inv;
    lambda.diagonal() += e_tau * d;
    Eigen::LLT<Eigen::MatrixXd> llt(lambda);
    if (llt.info() != Eigen::Success)
        throw NumericalError("factor update: precision matrix not positive definite");
    const double logdet_lambda =
        2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();

    Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(nk, nk));
    cov = 0.5 * (cov + cov.transpose()).eval();
    s.factors.mean[k].col(r) = e_tau * llt.solve(bb);
    s.factors.cov[k][r] = std::move(cov);
    s.factors.cov_logdet[k][r] = -logdet_lambda;
    cache.refresh_column(s.factors, r);
}

void update_gamma(FitState& s) {
    const int K = s.order();
    double half_sum_n = 0;
    for (int k = 0; k < K; ++k) half_sum_n += 0.5 * s.grid.Y.dims[k];
    for (int r = 0; r < s.rank; ++r) {
        double b = s.config.hyper.b_gamma;
        for (int k = 0; k < K; ++k) {
            const Eigen::VectorXd& m = s.factors.mean[k].col(r);
            b += 0.5 * (m.dot(s.grams[k].inv * m) +
                        (s.grams[k].inv.array() * s.factors.cov[k][r].array()).sum());
        }
        s.hypers.a_gamma(r) = s.config.hyper.a_gamma + half_sum_n;
        s.hypers.b_gamma(r) = b;
        s.hypers.e_gamma(r) = std::min(s.hypers.a_gamma(r) / b, kGammaExpectationCap);
    }
}

double expected_masked_residual(const FitState& s) {
    ObsCache cache = build_obs_cache(s.grid);
    cache.rebuild_products(s.factors, s.rank);
    const int K = s.order();
    const int n = cache.count();
    double total = 0;
    for (int c = 0; c < n; ++c) {
        const double e = cache.y(c) - cache.psum(c);
        double extra = 0;
        for (int r = 0; r < s.rank; ++r) {
            double q = 1;
            for (int k = 0; k < K; ++k) {
                const int i = cache.idx[k][c];
                const double m = s.factors.mean[k](i, r);
                q *= m * m + s.factors.cov[k][r](i, i);
            }
            extra += q - cache.P(c, r) * cache.P(c, r);
        }
        total += e * e + extra;
    }
    return total;
}

void update_tau(FitState& s, ObsCache& cache) {
    const int K = s.order();
    const int n = cache.count();
    double erss = 0;
    for (int c = 0; c < n; ++c) {
        const double e = cache.y(c) - cache.psum(c);
        double extra = 0;
        for (int r = 0; r < s.rank; ++r) {
            double q = 1;
            for (int k = 0; k < K; ++k) {
                const int i = cache.idx[k][c];
                const double m = s.factors.mean[k](i, r);
                q *= m * m + s.factors.cov[k][r](i, i);
            }
            extra += q - cache.P(c, r) * cache.P(c, r);
        }
        erss += e * e + extra;
    }
    s.hypers.a_tau = s.config.hyper.a_tau + 0.5 * n;
    s.hypers.b_tau = s.config.hyper.b_tau + 0.5 * erss;
    s.hypers.e_tau = s.hypers.a_tau / s.hypers.b_tau;
}

double compute_elbo(const FitState& s) {
    const int K = s.order();
    const int R = s.rank;
    const double n_obs = static_cast<double>(s.grid.O.count());
    const HyperPriors& hp = s.config.hyper;
    constexpr double ln2pi = 1.8378770664093454835606594728112;

    const double e_tau = s.hypers.e_tau;
    const double eln_tau = digamma(s.hypers.a_tau) - std::log(s.hypers.b_tau);
    const double erss = expected_masked_residual(s);

    // <ln p(Y | U, tau)>
    double elbo = 0.5 * n_obs * (eln_tau - ln2pi) - 0.5 * e_tau * erss;

    // <ln p(U | gamma)> and Gaussian entropies
    for (int r = 0; r < R; ++r) {
        const double eg = s.hypers.e_gamma(r);
        const double elg = digamma(s.hypers.a_gamma(r)) - std::log(s.hypers.b_gamma(r));
        for (int k = 0; k < K; ++k) {
            const int nk = s.grid.Y.dims[k];
            const Eigen::VectorXd& m = s.factors.mean[k].col(r);
            const double quad = m.dot(s.grams[k].inv * m) +
                                (s.grams[k].inv.array() * s.factors.cov[k][r].array()).sum();
            elbo += -0.5 * nk * ln2pi + 0.5 * nk * elg - 0.5 * s.grams[k].logdet - 0.5 * eg * quad;
            elbo += 0.5 * (nk * (ln2pi + 1.0) + s.factors.cov_logdet[k][r]);
        }
        // <ln p(gamma_r)> + H[q(gamma_r)]
        elbo += hp.a_gamma * std::log(hp.b_gamma) - std::lgamma(hp.a_gamma) +
                (hp.a_gamma - 1.0) * elg - hp.b_gamma * eg;
        elbo += gamma_entropy(s.hypers.a_gamma(r), s.hypers.b_gamma(r));
    }

    // <ln p(tau)> + H[q(tau)]
    elbo += hp.a_tau * std::log(hp.b_tau) - std::lgamma(hp.a_tau) + (hp.a_tau - 1.0) * eln_tau -
            hp.b_tau * e_tau;
    elbo += gamma_entropy(s.hypers.a_tau, s.hypers.b_tau);
    return elbo;
}

int prune_ranks(FitState& s) {
    const int K = s.order();
    const int R = s.rank;
    if (R <= 1) return 0;

    Eigen::VectorXd invg(R), lpow(R);
    for (int r = 0; r < R; ++r) {
        invg(r) = s.hypers.b_gamma(r) / s.hypers.a_gamma(r);
        lpow(r) = component_log_power(s.factors, K, r);
    }
    const double invg_max = invg.maxCoeff();
    const double lpow_max = lpow.maxCoeff();

    std::vector<int> keep;
    for (int r = 0; r < R; ++r) {
        const bool variance_ok = invg(r) >= s.config.prune_ratio * invg_max;
        const bool power_ok = lpow(r) - lpow_max >= std::log(kDeadPowerRatio);
        if (variance_ok && power_ok) keep.push_back(r);
    }
    if (keep.empty()) {
        int best = 0;
        lpow_max == -std::numeric_limits<double>::infinity()
            ? static_cast<void>(invg.maxCoeff(&best))
            : static_cast<void>(lpow.maxCoeff(&best));
        keep.push_back(best);
    }
    if (static_cast<int>(keep.size()) == R) return 0;

    const int R2 = static_cast<int>(keep.size());
    for (int k = 0; k < K; ++k) {
        Eigen::MatrixXd m(s.grid.Y.dims[k], R2);
        std::vector<Eigen::MatrixXd> cov(R2);
        std::vector<double> logdet(R2);
        for (int j = 0; j < R2; ++j) {
            m.col(j) = s.factors.mean[k].col(keep[j]);
            cov[j] = s.factors.cov[k][keep[j]];
            logdet[j] = s.factors.cov_logdet[k][keep[j]];
        }
        s.factors.mean[k] = std::move(m);
        s.factors.cov[k] = std::move(cov);
        s.factors.cov_logdet[k] = std::move(logdet);
    }
    Eigen::VectorXd ag(R2), bg(R2), eg(R2);
    for (int j = 0; j < R2; ++j) {
        ag(j) = s.hypers.a_gamma(keep[j]);
        bg(j) = s.hypers.b_gamma(keep[j]);
        eg(j) = s.hypers.e_gamma(keep[j]);
    }
    s.hypers.a_gamma = ag;
    s.hypers.b_gamma = bg;
    s.hypers.e_gamma = eg;
    const int removed = R - R2;
    s.rank = R2;
    return removed;
}

DenseTensor reconstruct_means(const FitState& s) {
    CpFactors f;
    f.U = s.factors.mean;
    return cp_reconstruct(f, s.grid.Y.dims);
}

FitState fit(const GriddedData& g, const ModelConfig& cfg,
             const std::function<void(const FitState&)>& on_sweep) {
    FitState s = init_state(g, cfg);
    ObsCache cache = build_obs_cache(g);
    const int K = s.order();

    DenseTensor prev = reconstruct_means(s);
    for (int it = 0; it < cfg.max_iters; ++it) {
        cache.rebuild_products(s.factors, s.rank);
        for (int k = 0; k < K; ++k)
            for (int r = 0; r < s.rank; ++r) update_factor(s, cache, k, r);
        update_gamma(s);
        if (prune_ranks(s) > 0) cache.rebuild_products(s.factors, s.rank);
        update_tau(s, cache);

        const double elbo = compute_elbo(s);
        if (!std::isfinite(elbo))
            throw NumericalError("fit: non-finite ELBO at sweep " + std::to_string(it + 1));
        s.elbo_trace.push_back(elbo);
        s.rank_trace.push_back(s.rank);
        s.iters_run = it + 1;

        DenseTensor rec = reconstruct_means(s);
        double num = 0, den = 0;
        for (size_t i = 0; i < rec.values.size(); ++i) {
            const double d = rec.values[i] - prev.values[i];
            num += d * d;
            den += prev.values[i] * prev.values[i];
        }
        const double relchg = den > 0 ? std::sqrt(num / den) : std::sqrt(num);
        if (!std::isfinite(relchg))
            throw NumericalError("fit: non-finite reconstruction at sweep " + std::to_string(it + 1));
        prev = std::move(rec);

        if (on_sweep) on_sweep(s);

        const size_t t = s.rank_trace.size();
        const bool rank_stable =
            t >= 3 && s.rank_trace[t - 1] == s.rank_trace[t - 2] &&
            s.rank_trace[t - 2] == s.rank_trace[t - 3];
        if (relchg < cfg.conv_tol && rank_stable) {
            s.converged = true;
            break;
        }
    }
    return s;
}

}  // namespace fbtc
