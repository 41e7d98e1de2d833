#pragma once

#include "fbtc/grid.hpp"
#include "fbtc/kernels.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fbtc {

struct HyperPriors {
    double a_gamma = 1e-3;
    double b_gamma = 1e-3;
    double a_tau = 1e-3;
    double b_tau = 1e-3;
};

// Overflow guard on <gamma_r>; pruning removes the component long before a
// healthy run gets near this.
inline constexpr double kGammaExpectationCap = 1e12;

enum class InitScheme { Deflate, Svd, Random };

InitScheme init_scheme_from_string(const std::string& s);
std::string init_scheme_to_string(InitScheme s);

struct ModelConfig {
    int rank_init = -1;  // -1 = auto: max mode size
    HyperPriors hyper;
    double prune_ratio = 1e-4;
    int max_iters = 200;
    double conv_tol = 1e-5;
    std::vector<KernelSpec> kernels;  // one per mode, or single entry broadcast
    InitScheme init = InitScheme::Deflate;
    std::uint64_t seed = 0;

    KernelSpec kernel_for_mode(int k) const {
        if (kernels.empty()) return KernelSpec{};
        return kernels[kernels.size() == 1 ? 0 : static_cast<size_t>(k)];
    }
};

// Gaussian posteriors of the per-mode latent factor columns.
struct FactorPosterior {
    std::vector<Eigen::MatrixXd> mean;                    // per mode: N_k x R
    std::vector<std::vector<Eigen::MatrixXd>> cov;        // per mode, per rank: N_k x N_k
    std::vector<std::vector<double>> cov_logdet;          // cached log det of cov
};

// Gamma posteriors of the component precisions and the noise precision.
struct HyperPosteriors {
    Eigen::VectorXd a_gamma, b_gamma;  // per rank
    double a_tau = 0.0, b_tau = 0.0;
    Eigen::VectorXd e_gamma;           // a_gamma/b_gamma, capped
    double e_tau = 1.0;
};

struct FitState {
    GriddedData grid;
    std::vector<GramMatrix> grams;
    FactorPosterior factors;
    HyperPosteriors hypers;
    int rank = 0;
    int iters_run = 0;
    bool converged = false;
    std::vector<double> elbo_trace;   // one entry per sweep
    std::vector<int> rank_trace;      // rank after each sweep
    ModelConfig config;

    int order() const { return grid.Y.order(); }
};

}  // namespace fbtc
