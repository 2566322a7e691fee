#pragma once

#include <stdexcept>

namespace mmlora {

// invalid configuration or API misuse; maps to CLI exit code 1
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// divergence or integrity failure during training; maps to CLI exit code 2
struct TrainFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mmlora
