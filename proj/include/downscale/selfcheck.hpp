#pragma once

#include <string>
#include <vector>

namespace downscale {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double ms = 0.0;
};

/// Fault-injection knobs for mutation-testing the checks themselves. The CLI
/// always runs with defaults; tests flip a knob and expect the matching check
/// to fail.
struct SelfCheckHooks {
    double conv_grad_weight_scale = 1.0;
};

/// The fast invariant suite behind `downscale_lab check`: forward oracles,
/// gradient checks, transform round-trips, determinism.
std::vector<CheckResult> run_self_checks(const SelfCheckHooks& hooks = {});

} // namespace downscale
