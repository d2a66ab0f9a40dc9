#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "posediff/rng.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Variance schedule over timestamps 1..T with alpha_bar(0) = 1.
/// Tables are always double precision; immutable after construction.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas);

    int timesteps() const noexcept { return static_cast<int>(beta_.size()) - 1; }
    double beta(int t) const { return beta_.at(checked(t, 1)); }
    double alpha(int t) const { return alpha_.at(checked(t, 1)); }
    double alpha_bar(int t) const { return alpha_bar_.at(checked(t, 0)); }

    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

private:
    std::size_t checked(int t, int lowest) const;

    // index 0 of beta_/alpha_ is unused padding so indices match timestamps
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
};

/// Linear kind interpolates beta evenly over [beta_min, beta_max].
/// Cosine kind uses the squared-cosine alpha_bar curve (offset 0.008) with
/// every beta clamped into [beta_min, beta_max].
NoiseSchedule build_schedule(int timesteps, ScheduleKind kind, double beta_min, double beta_max);

inline constexpr double kScheduleTolerance = 1e-12;

namespace detail {
inline void check_timestamp(int t, int lowest, const NoiseSchedule& sched, const char* what) {
    if (t < lowest || t > sched.timesteps()) {
        throw RangeError(std::string(what) + ": timestamp " + std::to_string(t) + " outside [" +
                         std::to_string(lowest) + ", " + std::to_string(sched.timesteps()) + "]");
    }
}
} // namespace detail

/// Y_t = sqrt(alpha_bar_t) * Y0 + eps * sqrt(1 - alpha_bar_t)
template <typename Scalar>
PoseSequence3D<Scalar> forward_diffuse(const PoseSequence3D<Scalar>& y0, int t, const NoiseSchedule& sched,
                                       const NoiseSample<Scalar>& noise) {
    detail::check_timestamp(t, 1, sched, "forward_diffuse");
    require_same_shape(y0, noise.epsilon, "forward_diffuse");
    const double ab = sched.alpha_bar(t);
    const auto signal = static_cast<Scalar>(std::sqrt(ab));
    const auto spread = static_cast<Scalar>(std::sqrt(1.0 - ab));
    return {y0.frames(), y0.joints(), signal * y0.coords() + spread * noise.epsilon.coords()};
}

/// Noise implied by the pair (Y_t, Y0_hat) at timestamp t.
template <typename Scalar>
PoseSequence3D<Scalar> ddim_epsilon(const PoseSequence3D<Scalar>& yt, const PoseSequence3D<Scalar>& y0_hat,
                                    int t, const NoiseSchedule& sched) {
    detail::check_timestamp(t, 1, sched, "ddim_epsilon");
    require_same_shape(yt, y0_hat, "ddim_epsilon");
    const double ab = sched.alpha_bar(t);
    if (!(ab < 1.0)) {
        throw DegenerateError("ddim_epsilon: alpha_bar(" + std::to_string(t) + ") == 1");
    }
    const auto signal = static_cast<Scalar>(std::sqrt(ab));
    const auto inv_spread = static_cast<Scalar>(1.0 / std::sqrt(1.0 - ab));
    return {yt.frames(), yt.joints(), (yt.coords() - signal * y0_hat.coords()) * inv_spread};
}

double ddim_sigma(int t, int t_prev, const NoiseSchedule& sched);

/// One reverse step from t to t_prev. With `deterministic` the sigma term is
/// dropped entirely (also inside the square root).
template <typename Scalar>
PoseSequence3D<Scalar> ddim_step(const PoseSequence3D<Scalar>& yt, const PoseSequence3D<Scalar>& y0_hat, int t,
                                 int t_prev, const NoiseSchedule& sched, const NoiseSample<Scalar>& noise,
                                 bool deterministic) {
    if (!(0 <= t_prev && t_prev < t)) {
        throw RangeError("ddim_step: need 0 <= t_prev < t, got t=" + std::to_string(t) +
                         " t_prev=" + std::to_string(t_prev));
    }
    const double sigma = deterministic ? 0.0 : ddim_sigma(t, t_prev, sched);
    const auto eps_t = ddim_epsilon(yt, y0_hat, t, sched);
    const double ab_prev = sched.alpha_bar(t_prev);
    double residual = 1.0 - ab_prev - sigma * sigma;
    if (residual < -kScheduleTolerance) {
        throw ScheduleError("ddim_step: 1 - alpha_bar_prev - sigma^2 = " + std::to_string(residual) +
                            " is negative");
    }
    residual = std::max(residual, 0.0);
    auto coords = (static_cast<Scalar>(std::sqrt(ab_prev)) * y0_hat.coords() +
                   static_cast<Scalar>(std::sqrt(residual)) * eps_t.coords())
                      .eval();
    if (!deterministic && sigma > 0.0) {
        require_same_shape(yt, noise.epsilon, "ddim_step");
        coords += static_cast<Scalar>(sigma) * noise.epsilon.coords();
    }
    return {yt.frames(), yt.joints(), std::move(coords)};
}

/// round(T * (1 - m / M)). m = 0 yields T (the starting timestamp), m = M yields 0.
int timestamp_for_iteration(int m, int iterations, int timesteps);

} // namespace posediff
