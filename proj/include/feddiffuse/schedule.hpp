#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "feddiffuse/errors.hpp"

namespace feddiffuse {

// Precomputed tables of the forward-process noise schedule.  Timesteps are
// 1-based; beta/alpha/sigma store entry i for t = i + 1, while alpha_bar has
// length T + 1 and is indexed by t directly, with alpha_bar[0] == 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    double beta_at(int t) const { return beta[static_cast<std::size_t>(t) - 1]; }
    double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t) - 1]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(t)]; }
    double sigma_at(int t) const { return sigma[static_cast<std::size_t>(t) - 1]; }

    bool valid_t(int t) const { return t >= 1 && t <= T; }
};

// Linear beta schedule from beta_start to beta_end inclusive.  The derived
// tables satisfy alpha_t = 1 - beta_t, alpha_bar_t = prod_{s<=t} alpha_s and
// sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t, which makes
// sigma_1 exactly zero.
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) {
        throw ConfigError("build_schedule: T must be >= 1, got " + std::to_string(T));
    }
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ConfigError("build_schedule: need 0 < beta_start <= beta_end < 1, got [" +
                          std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
    }

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    if (T == 1) {
        s.beta[0] = beta_start;
    } else {
        const double step = (beta_end - beta_start) / static_cast<double>(T - 1);
        for (int i = 0; i < T; ++i) {
            s.beta[static_cast<std::size_t>(i)] = beta_start + step * static_cast<double>(i);
        }
        s.beta.front() = beta_start;
        s.beta.back() = beta_end;
    }

    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    s.sigma.resize(s.beta.size());
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const std::size_t i = static_cast<std::size_t>(t) - 1;
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[i] * s.alpha[i];
        const double num = 1.0 - s.alpha_bar[i];
        const double den = 1.0 - s.alpha_bar[static_cast<std::size_t>(t)];
        s.sigma[i] = std::sqrt(num / den * s.beta[i]);
    }
    return s;
}

}  // namespace feddiffuse
