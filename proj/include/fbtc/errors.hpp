#pragma once

#include <stdexcept>

namespace fbtc {

// File and format problems; the CLI maps these to exit code 4.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values and failed factorizations; CLI exit code 3.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fbtc
