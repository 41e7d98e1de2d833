#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <string>
#include <vector>

namespace fbtc {

enum class KernelFamily { Matern52, Rbf, Exponential, Identity };

KernelFamily kernel_family_from_string(const std::string& s);
std::string kernel_family_to_string(KernelFamily f);

struct KernelSpec {
    KernelFamily family = KernelFamily::Matern52;
    double lengthscale = 1.0;
    // Negative means auto: 1e-8 x mean diagonal of the Gram matrix.
    double jitter = -1.0;
};

double kernel_eval(const KernelSpec& spec, double a, double b);

// Gram matrix over an ordered coordinate set, factorized once with jitter.
// On Cholesky failure the jitter escalates x10 up to 1e-2 x mean diagonal,
// then construction fails.
struct GramMatrix {
    Eigen::VectorXd coords;
    Eigen::MatrixXd sigma;              // kernel values, no jitter
    Eigen::LLT<Eigen::MatrixXd> llt;    // factor of sigma + delta*I
    Eigen::MatrixXd inv;                // (sigma + delta*I)^{-1}
    double delta = 0.0;                 // jitter actually used
    double logdet = 0.0;                // log det(sigma + delta*I)

    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return llt.solve(b); }
};

GramMatrix build_gram(const KernelSpec& spec, const std::vector<double>& coords);

Eigen::MatrixXd solve_spd(const GramMatrix& g, const Eigen::MatrixXd& b);

// Cross-kernel matrix K[i,j] = k(train[i], test[j]).
Eigen::MatrixXd cross_gram(const KernelSpec& spec, const std::vector<double>& train,
                           const std::vector<double>& test);

}  // namespace fbtc
