#include "fbtc/kernels.hpp"

#include "fbtc/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace fbtc {

KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "matern52") return KernelFamily::Matern52;
    if (s == "rbf") return KernelFamily::Rbf;
    if (s == "exponential") return KernelFamily::Exponential;
    if (s == "identity") return KernelFamily::Identity;
    throw std::invalid_argument("unknown kernel family: " + s);
}

std::string kernel_family_to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::Matern52: return "matern52";
        case KernelFamily::Rbf: return "rbf";
        case KernelFamily::Exponential: return "exponential";
        case KernelFamily::Identity: return "identity";
    }
    return "?";
}

double kernel_eval(const KernelSpec& spec, double a, double b) {
    const double h = spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::Matern52: {
            const double l = std::abs(a - b);
            const double s = std::sqrt(5.0) * l / h;
            return (1.0 + s + 5.0 * l * l / (3.0 * h * h)) * std::exp(-s);
        }
        case KernelFamily::Rbf: {
            const double l = std::abs(a - b);
            return std::exp(-l * l / (h * h));
        }
        case KernelFamily::Exponential:
            return std::exp(a * b);
        case KernelFamily::Identity:
            return a == b ? 1.0 : 0.0;
    }
    return 0.0;
}

GramMatrix build_gram(const KernelSpec& spec, const std::vector<double>& coords) {
    const int n = static_cast<int>(coords.size());
    if (n == 0) throw std::invalid_argument("gram: empty coordinate set");
    GramMatrix g;
    g.coords = Eigen::Map<const Eigen::VectorXd>(coords.data(), n);
    g.sigma.resize(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            const double v = kernel_eval(spec, coords[i], coords[j]);
            g.sigma(i, j) = v;
            g.sigma(j, i) = v;
        }
    if (!g.sigma.allFinite()) throw NumericalError("gram: non-finite kernel values");

    const double mean_diag = g.sigma.diagonal().mean();
    const double cap = 1e-2 * mean_diag;
    double delta = spec.jitter >= 0 ? spec.jitter : 1e-8 * mean_diag;
    if (spec.family == KernelFamily::Identity && spec.jitter < 0) delta = 0.0;

    for (;;) {
        Eigen::MatrixXd a = g.sigma;
        a.diagonal().array() += delta;
        g.llt.compute(a);
        if (g.llt.info() == Eigen::Success) {
            g.delta = delta;
            g.logdet = 2.0 * g.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
            g.inv = g.llt.solve(Eigen::MatrixXd::Identity(n, n));
            return g;
        }
        const double next = delta == 0.0 ? 1e-8 * mean_diag : delta * 10.0;
        if (next > cap)
            throw NumericalError("gram: Cholesky failed at max jitter " +
                                     std::to_string(next));
        delta = next;
    }
}

Eigen::MatrixXd solve_spd(const GramMatrix& g, const Eigen::MatrixXd& b) {
    return g.llt.solve(b);
}

Eigen::MatrixXd cross_gram(const KernelSpec& spec, const std::vector<double>& train,
                           const std::vector<double>& test) {
    Eigen::MatrixXd k(train.size(), test.size());
    for (size_t i = 0; i < train.size(); ++i)
        for (size_t j = 0; j < test.size(); ++j)
            k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                kernel_eval(spec, train[i], test[j]);
    return k;
}

}  // namespace fbtc
