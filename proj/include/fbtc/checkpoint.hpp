#pragma once

#include "fbtc/model.hpp"

#include <string>

namespace fbtc {

// Structured text snapshot of a fitted model: config, coordinate sets with
// the jitter actually used, factor means/covariances (row-major), gamma/tau
// posterior parameters, ELBO and rank traces. Round-trippable at full
// precision; the Gram matrices are rebuilt on load from the stored
// coordinates and jitter. The training values and mask are not stored, so a
// loaded state supports prediction and reconstruction but not further
// fitting.
void save_checkpoint(const std::string& path, const FitState& state);
FitState load_checkpoint(const std::string& path);

}  // namespace fbtc
