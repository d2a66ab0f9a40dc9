#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "posediff/container.hpp"
#include "posediff/denoiser.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/prompt.hpp"

namespace posediff {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 4;
    double lr = 6e-5;
    double lr_decay = 0.993;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
    /// Global gradient-norm clip; 0 disables clipping.
    double grad_clip = 0.0;
    /// Stop after this many optimizer steps in total; 0 means no cap.
    std::int64_t max_steps = 0;

    void validate() const;
};

/// lr0 * decay^epoch
double lr_schedule(int epoch, const TrainConfig& config);

/// sqrt(mean((Y0 - Y0_hat)^2)) over all coordinates.
template <typename Scalar>
double mse_loss(const PoseSequence3D<Scalar>& y0, const PoseSequence3D<Scalar>& y0_hat);

/// Same loss recorded on a tape against a constant target.
template <typename Scalar>
Var<Scalar> rmse_loss(Var<Scalar> prediction, const Matrix<Scalar>& target);

template <typename Scalar>
using ParameterRefs = std::map<std::string, Matrix<Scalar>*>;

template <typename Scalar>
using GradientMap = std::map<std::string, Matrix<Scalar>>;

template <typename Scalar>
struct OptimizerState {
    std::map<std::string, Matrix<Scalar>> first_moment;
    std::map<std::string, Matrix<Scalar>> second_moment;
    std::int64_t step = 0;
};

/// Decoupled weight decay Adam step with bias correction:
/// p -= lr * wd * p, then p -= lr * m_hat / (sqrt(v_hat) + eps).
/// Parameters without a gradient entry are left untouched.
template <typename Scalar>
void adamw_step(const ParameterRefs<Scalar>& params, const GradientMap<Scalar>& grads, OptimizerState<Scalar>& state,
                double lr, const TrainConfig& config);

/// Scales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_gradients(GradientMap<Scalar>& grads, double max_norm);

/// Everything training updates.
template <typename Scalar>
struct TrainableState {
    DenoiserWeights<Scalar> weights;
    PromptBank<Scalar> bank;

    ParameterRefs<Scalar> refs();
};

/// One normalized training sequence.
template <typename Scalar>
struct TrainingSample {
    PoseSequence2D<Scalar> keypoints;
    PoseSequence3D<Scalar> target;
    PromptSpec prompt;
};

struct StepRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct EpochResult {
    double mean_loss = 0.0;
    std::int64_t steps = 0;
    bool stopped_early = false;
};

/// Loss and gradients of one sample at timestamp t with the given noise.
template <typename Scalar>
double sample_loss_and_gradients(const TrainableState<Scalar>& state, const TrainingSample<Scalar>& sample,
                                 const FrozenTokens& frozen, const NoiseSchedule& sched, int t,
                                 const NoiseSample<Scalar>& noise, GradientMap<Scalar>* grads);

/// One pass over `samples` in a seeded shuffled order. Per sample a timestamp
/// is drawn uniformly from [1, T] with fresh noise; per batch the gradients
/// are averaged and one AdamW step is applied. Randomness derives only from
/// (seed, epoch). The first `skip_batches` batches are drawn but not applied,
/// which resumes an interrupted epoch exactly.
template <typename Scalar>
EpochResult train_epoch(const std::vector<TrainingSample<Scalar>>& samples, TrainableState<Scalar>& state,
                        OptimizerState<Scalar>& optimizer, const NoiseSchedule& sched, const TrainConfig& config,
                        FrozenTokenSource& frozen, int epoch, std::uint64_t seed,
                        const std::function<void(const StepRecord&)>& on_step = {}, std::int64_t skip_batches = 0);

/// Per-tensor comparison of tape gradients against central differences.
struct GradientCheckEntry {
    std::string name;
    double relative_error = 0.0;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    double absolute_error = 0.0;
};

/// Gradients whose analytic and numeric norms both fall below this are
/// roundoff around an exact zero (attention key biases, for one).
inline constexpr double kGradientNoiseFloor = 1e-9;

/// Double-precision check of every trainable tensor for the loss
/// rmse(D(Y_t, X, t, P), target). Relative error per tensor is
/// |g - g_fd| / max(|g|, |g_fd|), taken as 0 when both norms are below
/// kGradientNoiseFloor.
std::vector<GradientCheckEntry> gradient_check(const TrainableState<double>& state, const FrozenTokens& frozen,
                                               const PromptSpec& spec, const PoseSequence3D<double>& yt,
                                               const PoseSequence2D<double>& x, int t,
                                               const PoseSequence3D<double>& target, double step = 1e-5);

/// Weights, modifiers, optimizer moments and bookkeeping; save/load is bit-exact.
template <typename Scalar>
struct Checkpoint {
    TrainableState<Scalar> state;
    OptimizerState<Scalar> optimizer;
    int epoch = 0;                  // completed epochs
    std::int64_t epoch_batches = 0;  // batches already applied in epoch `epoch`
    std::int64_t step = 0;          // completed optimizer steps
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();
    std::string config_hash;

    TensorContainer to_container() const;
    static Checkpoint from_container(const TensorContainer& container, const DenoiserConfig& config);
};

} // namespace posediff
