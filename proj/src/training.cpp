#include "posediff/training.hpp"

#include <chrono>
#include <cmath>

#include "posediff/parallel.hpp"
#include "posediff/rng.hpp"

namespace posediff {

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) {
        throw ConfigError("train.epochs and train.batch_size must be positive");
    }
    if (!(lr > 0.0) || !(lr_decay > 0.0 && lr_decay <= 1.0)) {
        throw ConfigError("train.lr must be positive and train.lr_decay in (0, 1]");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
        throw ConfigError("AdamW betas must lie in (0, 1) and eps must be positive");
    }
    if (weight_decay < 0.0 || grad_clip < 0.0 || max_steps < 0) {
        throw ConfigError("weight_decay, grad_clip and max_steps must be non-negative");
    }
}

double lr_schedule(int epoch, const TrainConfig& config) {
    if (epoch < 0) {
        throw RangeError("lr_schedule: negative epoch");
    }
    return config.lr * std::pow(config.lr_decay, epoch);
}

template <typename Scalar>
double mse_loss(const PoseSequence3D<Scalar>& y0, const PoseSequence3D<Scalar>& y0_hat) {
    require_same_shape(y0, y0_hat, "mse_loss");
    const auto diff = (y0.coords().template cast<double>() - y0_hat.coords().template cast<double>()).eval();
    return std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
}

template <typename Scalar>
Var<Scalar> rmse_loss(Var<Scalar> prediction, const Matrix<Scalar>& target) {
    if (prediction.rows() != target.rows() || prediction.cols() != target.cols()) {
        throw ShapeError("rmse_loss: prediction and target shapes differ");
    }
    auto diff = ad::sub(prediction, prediction.tape->constant(target));
    return ad::sqrt(ad::mean_all(ad::hadamard(diff, diff)));
}

template <typename Scalar>
void adamw_step(const ParameterRefs<Scalar>& params, const GradientMap<Scalar>& grads, OptimizerState<Scalar>& state,
                double lr, const TrainConfig& config) {
    for (const auto& [name, g] : grads) {
        if (!g.allFinite()) {
            throw NumericalError("non-finite gradient for '" + name + "'");
        }
    }
    state.step += 1;
    const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const auto b1 = static_cast<Scalar>(config.beta1);
    const auto b2 = static_cast<Scalar>(config.beta2);
    const auto step_size = static_cast<Scalar>(lr / correction1);
    const auto inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(correction2));
    const auto eps = static_cast<Scalar>(config.eps);
    const auto decay = static_cast<Scalar>(1.0 - lr * config.weight_decay);
    for (const auto& [name, param] : params) {
        auto g = grads.find(name);
        if (g == grads.end()) {
            continue;
        }
        if (g->second.rows() != param->rows() || g->second.cols() != param->cols()) {
            throw ShapeError("gradient for '" + name + "' does not match its parameter");
        }
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.size() == 0) {
            m = Matrix<Scalar>::Zero(param->rows(), param->cols());
            v = Matrix<Scalar>::Zero(param->rows(), param->cols());
        }
        m = b1 * m + (Scalar(1) - b1) * g->second;
        v = b2 * v + (Scalar(1) - b2) * g->second.cwiseProduct(g->second);
        *param *= decay;
        param->array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
    }
}

template <typename Scalar>
double clip_gradients(GradientMap<Scalar>& grads, double max_norm) {
    double total = 0.0;
    for (const auto& [_, g] : grads) {
        total += g.template cast<double>().squaredNorm();
    }
    const double norm = std::sqrt(total);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto factor = static_cast<Scalar>(max_norm / norm);
        for (auto& [_, g] : grads) {
            g *= factor;
        }
    }
    return norm;
}

template <typename Scalar>
ParameterRefs<Scalar> TrainableState<Scalar>::refs() {
    ParameterRefs<Scalar> out;
    for (auto& [name, m] : weights.tensors()) {
        out.emplace(name, &m);
    }
    if (!weights.config().use_prompt) {
        return out;
    }
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        out.emplace(PromptBank<Scalar>::parameter_name(k), &bank.modifiers[k]);
    }
    return out;
}

template <typename Scalar>
double sample_loss_and_gradients(const TrainableState<Scalar>& state, const TrainingSample<Scalar>& sample,
                                 const FrozenTokens& frozen, const NoiseSchedule& sched, int t,
                                 const NoiseSample<Scalar>& noise, GradientMap<Scalar>* grads) {
    const auto yt = forward_diffuse(sample.target, t, sched, noise);
    Tape<Scalar> tape(grads != nullptr);
    PromptInputs<Scalar> prompt{&state.bank, &frozen, &sample.prompt};
    auto pred = denoise_on_tape(tape, state.weights.config(), state.weights.tensors(), prompt, yt, sample.keypoints, t);
    auto loss = rmse_loss(pred, Matrix<Scalar>(sample.target.coords()));
    const double value = static_cast<double>(loss.value()(0, 0));
    if (grads != nullptr) {
        tape.backward(loss);
        *grads = tape.parameter_gradients();
    }
    return value;
}

template <typename Scalar>
EpochResult train_epoch(const std::vector<TrainingSample<Scalar>>& samples, TrainableState<Scalar>& state,
                        OptimizerState<Scalar>& optimizer, const NoiseSchedule& sched, const TrainConfig& config,
                        FrozenTokenSource& frozen, int epoch, std::uint64_t seed,
                        const std::function<void(const StepRecord&)>& on_step, std::int64_t skip_batches) {
    if (samples.empty()) {
        throw ConfigError("train_epoch: empty dataset");
    }
    config.validate();
    Rng rng(derive_seed(seed, 0x747261696eULL, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }

    std::vector<const FrozenTokens*> frozen_for(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        frozen_for[i] = &frozen.get(samples[i].prompt);
    }

    const double lr = lr_schedule(epoch, config);
    const auto batch = static_cast<std::size_t>(config.batch_size);
    EpochResult result;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const auto clock = std::chrono::steady_clock::now();
        const std::size_t count = std::min(batch, order.size() - start);
        std::vector<int> timestamps(count);
        std::vector<std::uint64_t> noise_seeds(count);
        for (std::size_t b = 0; b < count; ++b) {
            timestamps[b] = static_cast<int>(rng.uniform_int(1, sched.timesteps()));
            noise_seeds[b] = rng.engine()();
        }
        if (skip_batches > 0) {
            --skip_batches;
            continue;
        }
        if (config.max_steps > 0 && optimizer.step >= config.max_steps) {
            result.stopped_early = true;
            break;
        }
        std::vector<GradientMap<Scalar>> grads(count);
        std::vector<double> losses(count);
        parallel_for(count, [&](std::size_t b) {
            const auto& sample = samples[order[start + b]];
            const auto noise =
                NoiseSample<Scalar>::draw(sample.target.frames(), sample.target.joints(), noise_seeds[b]);
            losses[b] = sample_loss_and_gradients(state, sample, *frozen_for[order[start + b]], sched, timestamps[b],
                                                  noise, &grads[b]);
        });
        GradientMap<Scalar> total = std::move(grads[0]);
        for (std::size_t b = 1; b < count; ++b) {
            for (auto& [name, g] : grads[b]) {
                total.at(name) += g;
            }
        }
        const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(count));
        for (auto& [_, g] : total) {
            g *= inv;
        }
        if (config.grad_clip > 0.0) {
            clip_gradients(total, config.grad_clip);
        }
        adamw_step(state.refs(), total, optimizer, lr, config);
        if (!state.weights.all_finite()) {
            throw NumericalError("weights became non-finite at step " + std::to_string(optimizer.step));
        }
        double batch_loss = 0.0;
        for (double l : losses) {
            batch_loss += l;
        }
        batch_loss /= static_cast<double>(count);
        loss_sum += batch_loss;
        result.steps += 1;
        if (on_step) {
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock).count();
            on_step({epoch, optimizer.step, batch_loss, lr, ms});
        }
    }
    result.mean_loss = result.steps > 0 ? loss_sum / static_cast<double>(result.steps) : 0.0;
    return result;
}

std::vector<GradientCheckEntry> gradient_check(const TrainableState<double>& state, const FrozenTokens& frozen,
                                               const PromptSpec& spec, const PoseSequence3D<double>& yt,
                                               const PoseSequence2D<double>& x, int t,
                                               const PoseSequence3D<double>& target, double step) {
    auto evaluate = [&](const TrainableState<double>& s, GradientMap<double>* grads) {
        Tape<double> tape(grads != nullptr);
        PromptInputs<double> prompt{&s.bank, &frozen, &spec};
        auto pred = denoise_on_tape(tape, s.weights.config(), s.weights.tensors(), prompt, yt, x, t);
        auto loss = rmse_loss(pred, Matrix<double>(target.coords()));
        if (grads != nullptr) {
            tape.backward(loss);
            *grads = tape.parameter_gradients();
        }
        return loss.value()(0, 0);
    };
    GradientMap<double> analytic;
    evaluate(state, &analytic);

    TrainableState<double> probe = state;
    std::vector<GradientCheckEntry> report;
    for (auto& [name, ref] : probe.refs()) {
        Matrix<double> numeric(ref->rows(), ref->cols());
        for (Index i = 0; i < ref->size(); ++i) {
            const double keep = ref->data()[i];
            ref->data()[i] = keep + step;
            const double up = evaluate(probe, nullptr);
            ref->data()[i] = keep - step;
            const double down = evaluate(probe, nullptr);
            ref->data()[i] = keep;
            numeric.data()[i] = (up - down) / (2.0 * step);
        }
        auto it = analytic.find(name);
        const Matrix<double> g = it == analytic.end() ? Matrix<double>::Zero(ref->rows(), ref->cols()) : it->second;
        GradientCheckEntry entry;
        entry.name = name;
        entry.analytic_norm = g.norm();
        entry.numeric_norm = numeric.norm();
        const double scale = std::max(entry.analytic_norm, entry.numeric_norm);
        entry.absolute_error = (g - numeric).norm();
        entry.relative_error = scale <= kGradientNoiseFloor ? 0.0 : entry.absolute_error / scale;
        report.push_back(entry);
    }
    return report;
}

template <typename Scalar>
TensorContainer Checkpoint<Scalar>::to_container() const {
    TensorContainer c;
    for (const auto& [name, m] : state.weights.tensors()) {
        c.put_matrix("weights/" + name, m);
    }
    for (std::size_t k = 0; k < kPromptCount && state.weights.config().use_prompt; ++k) {
        c.put_matrix(PromptBank<Scalar>::parameter_name(k), state.bank.modifiers[k]);
    }
    for (const auto& [name, m] : optimizer.first_moment) {
        c.put_matrix("adam/m/" + name, m);
    }
    for (const auto& [name, m] : optimizer.second_moment) {
        c.put_matrix("adam/v/" + name, m);
    }
    auto& meta = c.meta();
    meta["kind"] = "checkpoint";
    meta["epoch"] = epoch;
    meta["epoch_batches"] = epoch_batches;
    meta["step"] = step;
    meta["optimizer_step"] = optimizer.step;
    meta["rng"] = {{"seed", seed}, {"rule", "per-epoch stream derive_seed(seed, 'train', epoch)"}};
    meta["config"] = config;
    meta["config_hash"] = config_hash;
    meta["dtype"] = to_string(dtype_of<Scalar>());
    return c;
}

template <typename Scalar>
Checkpoint<Scalar> Checkpoint<Scalar>::from_container(const TensorContainer& c, const DenoiserConfig& config) {
    if (c.meta().value("kind", "") != "checkpoint") {
        throw LoadError("container is not a checkpoint");
    }
    std::map<std::string, Matrix<Scalar>> tensors;
    for (const auto& [name, shape] : denoiser_layout(config)) {
        const auto full = "weights/" + name;
        if (!c.contains(full)) {
            throw CompatibilityError("checkpoint lacks tensor '" + name + "' required by the configuration");
        }
        auto m = c.matrix<Scalar>(full);
        if (m.rows() != shape.first || m.cols() != shape.second) {
            throw CompatibilityError("checkpoint tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                                     std::to_string(m.cols()) + ", configuration expects " +
                                     std::to_string(shape.first) + "x" + std::to_string(shape.second));
        }
        tensors.emplace(name, std::move(m));
    }
    Checkpoint out;
    out.state.weights = DenoiserWeights<Scalar>(config, std::move(tensors));
    out.state.bank.embed_dim = config.dim;
    for (std::size_t k = 0; k < kPromptCount && config.use_prompt; ++k) {
        out.state.bank.modifiers[k] = c.matrix<Scalar>(PromptBank<Scalar>::parameter_name(k));
        if (out.state.bank.modifiers[k].cols() != config.dim) {
            throw CompatibilityError("prompt modifier width does not match the configuration");
        }
    }
    for (const auto& name : c.names()) {
        if (name.rfind("adam/m/", 0) == 0) {
            out.optimizer.first_moment.emplace(name.substr(7), c.matrix<Scalar>(name));
        } else if (name.rfind("adam/v/", 0) == 0) {
            out.optimizer.second_moment.emplace(name.substr(7), c.matrix<Scalar>(name));
        }
    }
    const auto& meta = c.meta();
    out.optimizer.step = meta.value("optimizer_step", std::int64_t{0});
    out.epoch = meta.value("epoch", 0);
    out.epoch_batches = meta.value("epoch_batches", std::int64_t{0});
    out.step = meta.value("step", std::int64_t{0});
    out.seed = meta.at("rng").value("seed", std::uint64_t{0});
    out.config = meta.value("config", nlohmann::json::object());
    out.config_hash = meta.value("config_hash", "");
    return out;
}

#define POSEDIFF_INSTANTIATE_TRAINING(S)                                                                         \
    template double mse_loss(const PoseSequence3D<S>&, const PoseSequence3D<S>&);                                \
    template Var<S> rmse_loss(Var<S>, const Matrix<S>&);                                                         \
    template void adamw_step(const ParameterRefs<S>&, const GradientMap<S>&, OptimizerState<S>&, double,         \
                             const TrainConfig&);                                                                \
    template double clip_gradients(GradientMap<S>&, double);                                                     \
    template struct TrainableState<S>;                                                                           \
    template double sample_loss_and_gradients(const TrainableState<S>&, const TrainingSample<S>&,                \
                                              const FrozenTokens&, const NoiseSchedule&, int,                    \
                                              const NoiseSample<S>&, GradientMap<S>*);                           \
    template EpochResult train_epoch(const std::vector<TrainingSample<S>>&, TrainableState<S>&,                  \
                                     OptimizerState<S>&, const NoiseSchedule&, const TrainConfig&,               \
                                     FrozenTokenSource&, int, std::uint64_t,                                     \
                                     const std::function<void(const StepRecord&)>&, std::int64_t);               \
    template struct Checkpoint<S>;

POSEDIFF_INSTANTIATE_TRAINING(float)
POSEDIFF_INSTANTIATE_TRAINING(double)

#undef POSEDIFF_INSTANTIATE_TRAINING

} // namespace posediff
