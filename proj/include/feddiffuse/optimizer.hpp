#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "feddiffuse/errors.hpp"
#include "feddiffuse/model.hpp"

namespace feddiffuse {

enum class OptimizerKind { sgd, adam };

inline const char* optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

// First/second moment accumulators plus the step counter used for bias
// correction.  SGD keeps no state beyond the learning rate.
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<double> m, v;

    static OptimizerState sgd(double lr) {
        OptimizerState s;
        s.kind = OptimizerKind::sgd;
        s.lr = lr;
        return s;
    }

    static OptimizerState adam(double lr, std::size_t param_count) {
        OptimizerState s;
        s.kind = OptimizerKind::adam;
        s.lr = lr;
        s.m.assign(param_count, 0.0);
        s.v.assign(param_count, 0.0);
        return s;
    }

    static OptimizerState make(OptimizerKind kind, double lr, std::size_t param_count) {
        return kind == OptimizerKind::sgd ? sgd(lr) : adam(lr, param_count);
    }
};

// One descent step in place.  Adam uses bias-corrected moments with epsilon
// added after the square root.
inline void apply_update_inplace(ParameterVector& params, std::span<const double> grad,
                                 OptimizerState& state) {
    if (grad.size() != params.size()) {
        throw std::invalid_argument("apply_update: gradient length " + std::to_string(grad.size()) +
                                    " does not match parameter count " +
                                    std::to_string(params.size()));
    }
    if (!(state.lr >= 0.0)) {
        throw ConfigError("apply_update: learning rate must be non-negative");
    }
    if (state.kind == OptimizerKind::sgd) {
        ++state.step;
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= state.lr * grad[i];
        return;
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("apply_update: optimizer state sized for a different model");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

inline std::pair<ParameterVector, OptimizerState> apply_update(const ParameterVector& params,
                                                               std::span<const double> grad,
                                                               const OptimizerState& state) {
    ParameterVector p = params;
    OptimizerState s = state;
    apply_update_inplace(p, grad, s);
    return {std::move(p), std::move(s)};
}

}  // namespace feddiffuse
