#pragma once

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvnn {

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;      // measured worst case
    double tolerance = 0.0;  // pass iff value <= tolerance (or the check's own rule)
    std::string detail;
};

/// Seeded invariant suite: multinomial identity, kernel/feature-map identities,
/// Gram PSD, mk-vs-dense oracle equivalence, exact atomic fits, gradient audit
/// with its negative control, p = 1 reduction to convolution and the DnCNN-17
/// parameter count. Sizes are small enough to finish in seconds.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed);

nlohmann::json selfcheck_to_json(const std::vector<CheckResult>& results, std::uint64_t seed);

}  // namespace kvnn
