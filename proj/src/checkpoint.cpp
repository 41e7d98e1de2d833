#include "fbtc/checkpoint.hpp"

#include "fbtc/io.hpp"
#include "fbtc/vi.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace fbtc {

namespace {

constexpr int kVersion = 1;

void put(std::ostream& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
}

void expect(std::istream& in, const char* tag, const std::string& path) {
    std::string got;
    if (!(in >> got) || got != tag)
        throw IoError("checkpoint " + path + ": expected '" + tag + "', got '" + got + "'");
}

double get_d(std::istream& in, const std::string& path) {
    double v = 0;
    if (!(in >> v)) throw IoError("checkpoint " + path + ": truncated");
    return v;
}

long long get_i(std::istream& in, const std::string& path) {
    long long v = 0;
    if (!(in >> v)) throw IoError("checkpoint " + path + ": truncated");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const FitState& s) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    const int K = s.order();
    const int R = s.rank;

    f << "fbtc-checkpoint " << kVersion << '\n';
    f << "order " << K << '\n';
    f << "rank " << R << '\n';
    f << "iters_run " << s.iters_run << '\n';
    f << "converged " << (s.converged ? 1 : 0) << '\n';

    const ModelConfig& c = s.config;
    f << "rank_init " << c.rank_init << '\n';
    f << "prune_ratio ";
    put(f, c.prune_ratio);
    f << '\n';
    f << "max_iters " << c.max_iters << '\n';
    f << "conv_tol ";
    put(f, c.conv_tol);
    f << '\n';
    f << "init " << init_scheme_to_string(c.init) << '\n';
    f << "seed " << c.seed << '\n';
    f << "hyper ";
    put(f, c.hyper.a_gamma);
    f << ' ';
    put(f, c.hyper.b_gamma);
    f << ' ';
    put(f, c.hyper.a_tau);
    f << ' ';
    put(f, c.hyper.b_tau);
    f << '\n';
    f << "kernels " << c.kernels.size() << '\n';
    for (const KernelSpec& ks : c.kernels) {
        f << "kernel " << kernel_family_to_string(ks.family) << ' ';
        put(f, ks.lengthscale);
        f << ' ';
        put(f, ks.jitter);
        f << '\n';
    }

    for (int k = 0; k < K; ++k) {
        const int n = static_cast<int>(s.grid.coord_sets[k].size());
        f << "mode " << k << '\n';
        f << "coords " << n;
        for (double v : s.grid.coord_sets[k]) {
            f << ' ';
            put(f, v);
        }
        f << '\n';
        f << "delta ";
        put(f, s.grams[k].delta);
        f << '\n';
        f << "mean";
        for (int i = 0; i < n; ++i)
            for (int r = 0; r < R; ++r) {
                f << ' ';
                put(f, s.factors.mean[k](i, r));
            }
        f << '\n';
        for (int r = 0; r < R; ++r) {
            f << "cov " << r;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    f << ' ';
                    put(f, s.factors.cov[k][r](i, j));
                }
            f << '\n';
        }
        f << "cov_logdet";
        for (int r = 0; r < R; ++r) {
            f << ' ';
            put(f, s.factors.cov_logdet[k][r]);
        }
        f << '\n';
    }

    f << "gamma";
    for (int r = 0; r < R; ++r) {
        f << ' ';
        put(f, s.hypers.a_gamma(r));
    }
    for (int r = 0; r < R; ++r) {
        f << ' ';
        put(f, s.hypers.b_gamma(r));
    }
    f << '\n';
    f << "tau ";
    put(f, s.hypers.a_tau);
    f << ' ';
    put(f, s.hypers.b_tau);
    f << '\n';

    f << "elbo_trace " << s.elbo_trace.size();
    for (double v : s.elbo_trace) {
        f << ' ';
        put(f, v);
    }
    f << '\n';
    f << "rank_trace " << s.rank_trace.size();
    for (int v : s.rank_trace) f << ' ' << v;
    f << '\n';
    f << "end\n";
    if (!f) throw IoError("write failed: " + path);
}

FitState load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);

    expect(f, "fbtc-checkpoint", path);
    if (get_i(f, path) != kVersion) throw IoError("checkpoint " + path + ": unsupported version");

    FitState s;
    expect(f, "order", path);
    const int K = static_cast<int>(get_i(f, path));
    expect(f, "rank", path);
    const int R = static_cast<int>(get_i(f, path));
    if (K < 1 || R < 1) throw IoError("checkpoint " + path + ": bad order/rank");
    s.rank = R;
    expect(f, "iters_run", path);
    s.iters_run = static_cast<int>(get_i(f, path));
    expect(f, "converged", path);
    s.converged = get_i(f, path) != 0;

    expect(f, "rank_init", path);
    s.config.rank_init = static_cast<int>(get_i(f, path));
    expect(f, "prune_ratio", path);
    s.config.prune_ratio = get_d(f, path);
    expect(f, "max_iters", path);
    s.config.max_iters = static_cast<int>(get_i(f, path));
    expect(f, "conv_tol", path);
    s.config.conv_tol = get_d(f, path);
    expect(f, "init", path);
    std::string word;
    f >> word;
    s.config.init = init_scheme_from_string(word);
    expect(f, "seed", path);
    s.config.seed = static_cast<std::uint64_t>(get_i(f, path));
    expect(f, "hyper", path);
    s.config.hyper.a_gamma = get_d(f, path);
    s.config.hyper.b_gamma = get_d(f, path);
    s.config.hyper.a_tau = get_d(f, path);
    s.config.hyper.b_tau = get_d(f, path);
    expect(f, "kernels", path);
    const int nk = static_cast<int>(get_i(f, path));
    for (int i = 0; i < nk; ++i) {
        expect(f, "kernel", path);
        KernelSpec ks;
        f >> word;
        ks.family = kernel_family_from_string(word);
        ks.lengthscale = get_d(f, path);
        ks.jitter = get_d(f, path);
        s.config.kernels.push_back(ks);
    }

    s.grid.coord_sets.resize(K);
    s.factors.mean.resize(K);
    s.factors.cov.resize(K);
    s.factors.cov_logdet.resize(K);
    std::vector<int> dims(K);
    for (int k = 0; k < K; ++k) {
        expect(f, "mode", path);
        if (get_i(f, path) != k) throw IoError("checkpoint " + path + ": mode out of order");
        expect(f, "coords", path);
        const int n = static_cast<int>(get_i(f, path));
        dims[k] = n;
        s.grid.coord_sets[k].resize(static_cast<size_t>(n));
        for (double& v : s.grid.coord_sets[k]) v = get_d(f, path);
        expect(f, "delta", path);
        const double delta = get_d(f, path);
        KernelSpec ks = s.config.kernel_for_mode(k);
        ks.jitter = delta;
        s.grams.push_back(build_gram(ks, s.grid.coord_sets[k]));
        expect(f, "mean", path);
        s.factors.mean[k].resize(n, R);
        for (int i = 0; i < n; ++i)
            for (int r = 0; r < R; ++r) s.factors.mean[k](i, r) = get_d(f, path);
        s.factors.cov[k].resize(R);
        for (int r = 0; r < R; ++r) {
            expect(f, "cov", path);
            if (get_i(f, path) != r) throw IoError("checkpoint " + path + ": cov out of order");
            s.factors.cov[k][r].resize(n, n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) s.factors.cov[k][r](i, j) = get_d(f, path);
        }
        expect(f, "cov_logdet", path);
        s.factors.cov_logdet[k].resize(R);
        for (int r = 0; r < R; ++r) s.factors.cov_logdet[k][r] = get_d(f, path);
    }

    expect(f, "gamma", path);
    s.hypers.a_gamma.resize(R);
    s.hypers.b_gamma.resize(R);
    s.hypers.e_gamma.resize(R);
    for (int r = 0; r < R; ++r) s.hypers.a_gamma(r) = get_d(f, path);
    for (int r = 0; r < R; ++r) s.hypers.b_gamma(r) = get_d(f, path);
    for (int r = 0; r < R; ++r)
        s.hypers.e_gamma(r) =
            std::min(s.hypers.a_gamma(r) / s.hypers.b_gamma(r), kGammaExpectationCap);
    expect(f, "tau", path);
    s.hypers.a_tau = get_d(f, path);
    s.hypers.b_tau = get_d(f, path);
    s.hypers.e_tau = s.hypers.a_tau / s.hypers.b_tau;

    expect(f, "elbo_trace", path);
    s.elbo_trace.resize(static_cast<size_t>(get_i(f, path)));
    for (double& v : s.elbo_trace) v = get_d(f, path);
    expect(f, "rank_trace", path);
    s.rank_trace.resize(static_cast<size_t>(get_i(f, path)));
    for (int& v : s.rank_trace) v = static_cast<int>(get_i(f, path));
    expect(f, "end", path);

    // The stored snapshot carries coordinates only; values and mask are
    // zeroed placeholders with the right shape.
    s.grid.Y = DenseTensor(dims);
    s.grid.O = MaskTensor(dims);
    return s;
}

}  // namespace fbtc
