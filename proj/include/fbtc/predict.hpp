#pragma once

#include "fbtc/model.hpp"

namespace fbtc {

// Real-valued test indices, one K-vector per query point.
struct QuerySet {
    std::vector<std::vector<double>> indices;

    int count() const { return static_cast<int>(indices.size()); }
};

// Per-mode factor posteriors at the query points. The row covariance is
// shared across modes: a diagonal with entries 1/<gamma_r>.
struct FactorPrediction {
    std::vector<Eigen::MatrixXd> mean;  // per mode: M x R
    std::vector<Eigen::MatrixXd> cov;   // per mode: M x M, diagonal clamped >= 0
    Eigen::VectorXd omega;              // length R, 1/<gamma_r>
};

// Kernel-regression transfer of the fitted factor means (and covariance)
// from the training coordinates to the query coordinates, per mode:
//   mean_k = Kxt^T (Ktt + s2 I)^{-1} M_k
//   cov_k  = Kxx + s2 I - Kxt^T (Ktt + s2 I)^{-1} Kxt
FactorPrediction predict_factors(const FitState& state, const QuerySet& query, double sigma2);

// Predicted tensor values: per query row, sum over ranks of the product of
// per-mode predicted factor means. Deduplicates per-mode coordinates, so
// grid-structured query sets cost one small solve per mode.
std::vector<double> predict_values(const FitState& state, const QuerySet& query, double sigma2);

// Marginal std of factor entry (m, r) per mode: sqrt(cov_k[m,m] * omega_r).
std::vector<Eigen::VectorXd> predictive_std(const FactorPrediction& pred, int row);

}  // namespace fbtc
