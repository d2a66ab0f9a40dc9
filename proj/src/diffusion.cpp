#include "posediff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace posediff {

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "linear") {
        return ScheduleKind::linear;
    }
    if (name == "cosine") {
        return ScheduleKind::cosine;
    }
    throw ConfigError("unknown schedule kind '" + name + "' (expected linear or cosine)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

NoiseSchedule::NoiseSchedule(std::vector<double> betas) {
    if (betas.empty()) {
        throw ConfigError("noise schedule needs at least one timestamp");
    }
    const auto steps = betas.size();
    beta_.assign(steps + 1, 0.0);
    alpha_.assign(steps + 1, 1.0);
    alpha_bar_.assign(steps + 1, 1.0);
    for (std::size_t t = 1; t <= steps; ++t) {
        const double b = betas[t - 1];
        if (!(b > 0.0 && b < 1.0)) {
            throw ConfigError("beta(" + std::to_string(t) + ") = " + std::to_string(b) + " outside (0, 1)");
        }
        beta_[t] = b;
        alpha_[t] = 1.0 - b;
        alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
    }
}

std::size_t NoiseSchedule::checked(int t, int lowest) const {
    if (t < lowest || t > timesteps()) {
        throw RangeError("timestamp " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                         std::to_string(timesteps()) + "]");
    }
    return static_cast<std::size_t>(t);
}

NoiseSchedule build_schedule(int timesteps, ScheduleKind kind, double beta_min, double beta_max) {
    if (timesteps < 1) {
        throw ConfigError("schedule needs T >= 1, got " + std::to_string(timesteps));
    }
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
        throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(timesteps));
    if (kind == ScheduleKind::linear) {
        for (int t = 0; t < timesteps; ++t) {
            const double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
            betas[static_cast<std::size_t>(t)] = beta_min + (beta_max - beta_min) * frac;
        }
    } else {
        constexpr double offset = 0.008;
        auto curve = [&](int t) {
            const double x = (static_cast<double>(t) / timesteps + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        for (int t = 1; t <= timesteps; ++t) {
            const double b = 1.0 - curve(t) / curve(t - 1);
            betas[static_cast<std::size_t>(t - 1)] = std::clamp(b, beta_min, beta_max);
        }
    }
    return NoiseSchedule(std::move(betas));
}

double ddim_sigma(int t, int t_prev, const NoiseSchedule& sched) {
    if (!(0 <= t_prev && t_prev < t && t <= sched.timesteps())) {
        throw RangeError("ddim_sigma: need 0 <= t_prev < t <= T, got t=" + std::to_string(t) +
                         " t_prev=" + std::to_string(t_prev));
    }
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    if (!(ab < 1.0)) {
        throw DegenerateError("ddim_sigma: alpha_bar(" + std::to_string(t) + ") == 1");
    }
    const double ratio = std::max(0.0, (1.0 - ab_prev) / (1.0 - ab));
    const double decay = std::max(0.0, 1.0 - ab / ab_prev);
    return std::sqrt(ratio) * std::sqrt(decay);
}

int timestamp_for_iteration(int m, int iterations, int timesteps) {
    if (iterations < 1 || m < 0 || m > iterations) {
        throw RangeError("timestamp_for_iteration: need 0 <= m <= M and M >= 1");
    }
    const double t = static_cast<double>(timesteps) * (1.0 - static_cast<double>(m) / iterations);
    return static_cast<int>(std::lround(t));
}

} // namespace posediff
