#pragma once

#include "m3pt/autograd.hpp"

#include <vector>

namespace m3pt {

struct AdamSettings {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

// Adam over a ParamSet. State is keyed by parameter order, so the set must
// not change shape between steps.
class Adam {
public:
    explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

    // Applies one update from the accumulated grads, then clears them.
    // Returns the pre-clip global gradient norm.
    double step(ag::ParamSet& params);

    const AdamSettings& settings() const { return settings_; }
    long steps_taken() const { return t_; }

private:
    AdamSettings settings_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long t_ = 0;
};

}  // namespace m3pt
