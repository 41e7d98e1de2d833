#pragma once

#include "fbtc/errors.hpp"
#include "fbtc/model.hpp"

#include <functional>

namespace fbtc {

// Observed-cell cache plus the per-cell per-component mean-product table kept
// fresh across Gauss-Seidel updates.
struct ObsCache {
    std::vector<std::vector<int>> idx;  // per mode: mode index of each cell
    Eigen::VectorXd y;                  // observed values
    Eigen::MatrixXd P;                  // cell x rank mean products
    Eigen::VectorXd psum;               // row sums of P

    int count() const { return static_cast<int>(y.size()); }
    void rebuild_products(const FactorPosterior& f, int rank);
    void refresh_column(const FactorPosterior& f, int r);
};

ObsCache build_obs_cache(const GriddedData& g);

FitState init_state(const GriddedData& g, const ModelConfig& cfg);

// One closed-form coordinate update of (m_r^k, Psi_r^k); uses the freshest
// values of every other block.
void update_factor(FitState& s, ObsCache& cache, int k, int r);

void update_gamma(FitState& s);

void update_tau(FitState& s, ObsCache& cache);

// <|| O * (Y - [[U]]) ||_F^2> under the factorized posterior.
double expected_masked_residual(const FitState& s);

double compute_elbo(const FitState& s);

// Removes components whose relative variance <gamma_r>^{-1} falls below
// prune_ratio times the largest, plus components whose means have
// numerically collapsed (relative power below 1e-12); never empties.
// Returns the number of removed components.
int prune_ranks(FitState& s);

FitState fit(const GriddedData& g, const ModelConfig& cfg,
             const std::function<void(const FitState&)>& on_sweep = nullptr);

// Posterior mean reconstruction at the training grid.
DenseTensor reconstruct_means(const FitState& s);

}  // namespace fbtc
