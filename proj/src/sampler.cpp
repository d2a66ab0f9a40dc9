#include "posediff/sampler.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "posediff/parallel.hpp"
#include "posediff/rng.hpp"

namespace posediff {

namespace {

bool present(const std::vector<std::uint8_t>& presence, Index frame) {
    return presence.empty() || presence[static_cast<std::size_t>(frame)] != 0;
}

void check_presence(const std::vector<std::uint8_t>& presence, Index frames, const char* what) {
    if (!presence.empty() && static_cast<Index>(presence.size()) != frames) {
        throw ShapeError(std::string(what) + ": presence mask has " + std::to_string(presence.size()) +
                         " entries for " + std::to_string(frames) + " frames");
    }
}

} // namespace

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
        throw ConfigError("camera intrinsics need fx, fy > 0 and a finite principal point");
    }
}

CameraIntrinsics CameraIntrinsics::fallback(double width, double height) {
    return {1000.0, 1000.0, width / 2.0, height / 2.0};
}

template <typename Scalar>
PoseSequence2D<Scalar> reproject(const PoseSequence3D<Scalar>& pose, const CameraIntrinsics& cam) {
    cam.validate();
    PoseSequence2D<Scalar> out(pose.frames(), pose.joints());
    for (Index n = 0; n < pose.frames(); ++n) {
        for (Index j = 0; j < pose.joints(); ++j) {
            const auto p = pose.joint(n, j);
            const double z = static_cast<double>(p(2));
            if (!(z > kDepthEpsilon)) {
                throw DegenerateError("reproject: depth " + std::to_string(z) + " at frame " + std::to_string(n) +
                                      ", joint " + std::to_string(j));
            }
            out.joint(n, j)(0) = static_cast<Scalar>(cam.fx * static_cast<double>(p(0)) / z + cam.cx);
            out.joint(n, j)(1) = static_cast<Scalar>(cam.fy * static_cast<double>(p(1)) / z + cam.cy);
        }
    }
    return out;
}

template <typename Scalar>
void HypothesisSet<Scalar>::validate() const {
    if (hypotheses.empty()) {
        throw ConfigError("hypothesis set is empty");
    }
    for (const auto& h : hypotheses) {
        require_same_shape(hypotheses.front(), h, "hypothesis set");
    }
}

template <typename Scalar>
HypothesisSet<Scalar> sample_initial_hypotheses(int count, Index frames, Index joints, std::uint64_t seed) {
    if (count < 1) {
        throw ConfigError("need at least one hypothesis");
    }
    HypothesisSet<Scalar> set;
    set.seed_base = seed;
    for (int h = 0; h < count; ++h) {
        set.hypotheses.push_back(
            NoiseSample<Scalar>::draw(frames, joints, derive_seed(seed, static_cast<std::uint64_t>(h), 0)).epsilon);
    }
    return set;
}

template <typename Scalar>
HypothesisSet<Scalar> ddim_loop(const HypothesisSet<Scalar>& initial, int iterations, const NoiseSchedule& sched,
                                const DenoiseFn<Scalar>& denoise, bool deterministic) {
    initial.validate();
    const int T = sched.timesteps();
    if (iterations < 1 || iterations > T) {
        throw ConfigError("iterations must lie in [1, T], got " + std::to_string(iterations));
    }
    HypothesisSet<Scalar> out;
    out.seed_base = initial.seed_base;
    out.hypotheses.resize(initial.size());
    parallel_for(initial.size(), [&](std::size_t h) {
        auto y = initial.hypotheses[h];
        for (int m = 1; m <= iterations; ++m) {
            const int t = timestamp_for_iteration(m - 1, iterations, T);
            auto y0 = denoise(y, t);
            if (m == iterations) {
                out.hypotheses[h] = std::move(y0);
                break;
            }
            const int t_next = timestamp_for_iteration(m, iterations, T);
            const auto noise =
                deterministic ? NoiseSample<Scalar>::zeros(y.frames(), y.joints())
                              : NoiseSample<Scalar>::draw(y.frames(), y.joints(),
                                                          derive_seed(initial.seed_base, h, static_cast<std::uint64_t>(m)));
            y = ddim_step(y, y0, t, t_next, sched, noise, deterministic);
        }
    });
    return out;
}

template <typename Scalar>
std::vector<Matrix<double>> reprojection_errors(const std::vector<PoseSequence3D<Scalar>>& placed,
                                                const PoseSequence2D<double>& observed, const CameraIntrinsics& cam,
                                                const std::vector<std::uint8_t>& presence) {
    cam.validate();
    check_presence(presence, observed.frames(), "reprojection_errors");
    std::vector<Matrix<double>> errors;
    errors.reserve(placed.size());
    for (const auto& pose : placed) {
        if (pose.frames() != observed.frames() || pose.joints() != observed.joints()) {
            throw ShapeError("reprojection_errors: hypothesis and 2D input disagree on shape");
        }
        Matrix<double> e = Matrix<double>::Zero(pose.frames(), pose.joints());
        for (Index n = 0; n < pose.frames(); ++n) {
            if (!present(presence, n)) {
                continue;
            }
            for (Index j = 0; j < pose.joints(); ++j) {
                const auto p = pose.joint(n, j).template cast<double>();
                if (!(p(2) > kDepthEpsilon)) {
                    // not projectable: this hypothesis can never win the joint
                    e(n, j) = std::numeric_limits<double>::infinity();
                    continue;
                }
                const Eigen::RowVector2d uv(cam.fx * p(0) / p(2) + cam.cx, cam.fy * p(1) / p(2) + cam.cy);
                e(n, j) = (uv - observed.joint(n, j)).norm();
            }
        }
        errors.push_back(std::move(e));
    }
    return errors;
}

IndexMatrix jpma_select(const std::vector<Matrix<double>>& errors, const JpmaOptions& options) {
    if (errors.empty()) {
        throw ConfigError("jpma_select: no hypotheses");
    }
    const Index frames = errors.front().rows();
    const Index joints = errors.front().cols();
    for (const auto& e : errors) {
        if (e.rows() != frames || e.cols() != joints) {
            throw ShapeError("jpma_select: error matrices differ in shape");
        }
    }
    IndexMatrix index = IndexMatrix::Zero(frames, joints);
    if (options.per_frame) {
        for (Index n = 0; n < frames; ++n) {
            for (Index j = 0; j < joints; ++j) {
                double best = errors[0](n, j);
                for (std::size_t h = 1; h < errors.size(); ++h) {
                    if (errors[h](n, j) < best) {
                        best = errors[h](n, j);
                        index(n, j) = static_cast<int>(h);
                    }
                }
            }
        }
        return index;
    }
    for (Index j = 0; j < joints; ++j) {
        double best = errors[0].col(j).sum();
        int winner = 0;
        for (std::size_t h = 1; h < errors.size(); ++h) {
            const double total = errors[h].col(j).sum();
            if (total < best) {
                best = total;
                winner = static_cast<int>(h);
            }
        }
        index.col(j).setConstant(winner);
    }
    return index;
}

template <typename Scalar>
PoseSequence3D<Scalar> gather_joints(const HypothesisSet<Scalar>& hyps, const IndexMatrix& index) {
    hyps.validate();
    const auto& first = hyps.hypotheses.front();
    if (index.rows() != first.frames() || index.cols() != first.joints()) {
        throw ShapeError("gather_joints: index matrix does not match hypothesis shape");
    }
    PoseSequence3D<Scalar> out(first.frames(), first.joints());
    for (Index n = 0; n < first.frames(); ++n) {
        for (Index j = 0; j < first.joints(); ++j) {
            const int h = index(n, j);
            if (h < 0 || static_cast<std::size_t>(h) >= hyps.size()) {
                throw RangeError("gather_joints: hypothesis index " + std::to_string(h) + " out of range");
            }
            out.joint(n, j) = hyps.hypotheses[static_cast<std::size_t>(h)].joint(n, j);
        }
    }
    return out;
}

template <typename Scalar>
JpmaResult<Scalar> jpma_aggregate(const HypothesisSet<Scalar>& hyps, const PoseSequence2D<double>& observed,
                                  const CameraIntrinsics& cam, const JpmaOptions& options,
                                  const std::vector<std::uint8_t>& presence) {
    hyps.validate();
    const auto index = jpma_select(reprojection_errors(hyps.hypotheses, observed, cam, presence), options);
    return {gather_joints(hyps, index), index};
}

Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> solve_root_translation(
    const PoseSequence3D<double>& relative, const PoseSequence2D<double>& observed, const CameraIntrinsics& cam,
    const std::vector<std::uint8_t>& presence) {
    cam.validate();
    if (relative.frames() != observed.frames() || relative.joints() != observed.joints()) {
        throw ShapeError("solve_root_translation: 3D and 2D shapes differ");
    }
    check_presence(presence, relative.frames(), "solve_root_translation");
    const Index J = relative.joints();
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> out =
        Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>::Zero(relative.frames(), 3);
    for (Index n = 0; n < relative.frames(); ++n) {
        if (!present(presence, n)) {
            continue;
        }
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * J, 3);
        Eigen::VectorXd b(2 * J);
        for (Index j = 0; j < J; ++j) {
            const auto p = relative.joint(n, j);
            const double du = observed.joint(n, j)(0) - cam.cx;
            const double dv = observed.joint(n, j)(1) - cam.cy;
            a(2 * j, 0) = cam.fx;
            a(2 * j, 2) = -du;
            b(2 * j) = du * p(2) - cam.fx * p(0);
            a(2 * j + 1, 1) = cam.fy;
            a(2 * j + 1, 2) = -dv;
            b(2 * j + 1) = dv * p(2) - cam.fy * p(1);
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
        if (qr.rank() < 3) {
            throw DegenerateError("solve_root_translation: frame " + std::to_string(n) +
                                  " does not determine a translation");
        }
        out.row(n) = qr.solve(b).transpose();
    }
    return out;
}

PoseSequence3D<double> place_in_camera(const PoseSequence3D<double>& relative, const PoseSequence2D<double>& observed,
                                       const CameraIntrinsics& cam, const std::vector<std::uint8_t>& presence) {
    const auto translation = solve_root_translation(relative, observed, cam, presence);
    PoseSequence3D<double> out = relative;
    for (Index n = 0; n < relative.frames(); ++n) {
        if (!present(presence, n)) {
            continue;
        }
        for (Index j = 0; j < relative.joints(); ++j) {
            out.joint(n, j) += translation.row(n);
        }
    }
    return out;
}

template <typename Scalar>
Placement<Scalar> identity_placement() {
    return [](const PoseSequence3D<Scalar>& pose, const SequenceInput<Scalar>&) { return pose.template cast<double>(); };
}

template <typename Scalar>
Placement<Scalar> translation_placement(double scale) {
    return [scale](const PoseSequence3D<Scalar>& pose, const SequenceInput<Scalar>& input) {
        PoseSequence3D<double> mm(pose.frames(), pose.joints(), pose.coords().template cast<double>() * scale);
        return place_in_camera(mm, input.observed, input.camera, input.presence);
    };
}

void SamplerConfig::validate() const {
    if (hypotheses < 1 || iterations < 1) {
        throw ConfigError("sampler.hypotheses and sampler.iterations must be at least 1");
    }
}

template <typename Scalar>
Estimate<Scalar> estimate_single(const SequenceInput<Scalar>& input, const FrozenTokens& frozen,
                                 const SamplerContext<Scalar>& ctx, const SamplerConfig& config, std::uint64_t seed) {
    config.validate();
    if (ctx.weights == nullptr || ctx.bank == nullptr || ctx.schedule == nullptr || !ctx.placement) {
        throw InvariantViolation("estimate_single: incomplete sampler context");
    }
    const Index N = input.keypoints.frames();
    const Index J = input.keypoints.joints();
    if (input.observed.frames() != N || input.observed.joints() != J) {
        throw ShapeError("estimate_single: normalized and pixel keypoints differ in shape");
    }
    check_presence(input.presence, N, "estimate_single");

    const PromptInputs<Scalar> prompt{ctx.bank, &frozen, &input.prompt};
    const DenoiseFn<Scalar> denoise_fn = [&](const PoseSequence3D<Scalar>& yt, int t) {
        return denoise(*ctx.weights, prompt, yt, input.keypoints, t);
    };
    const auto initial = sample_initial_hypotheses<Scalar>(config.hypotheses, N, J, seed);
    const auto hyps = ddim_loop(initial, config.iterations, *ctx.schedule, denoise_fn, config.deterministic);

    std::vector<PoseSequence3D<double>> placed(hyps.size());
    parallel_for(hyps.size(), [&](std::size_t h) { placed[h] = ctx.placement(hyps.hypotheses[h], input); });
    const auto index = jpma_select(reprojection_errors(placed, input.observed, input.camera, input.presence),
                                   config.jpma);
    Estimate<Scalar> out{gather_joints(hyps, index), index};
    for (Index n = 0; n < N; ++n) {
        if (!present(input.presence, n)) {
            out.pose.coords().middleRows(n * J, J).setZero();
        }
    }
    return out;
}

std::uint64_t character_seed(std::uint64_t seed, std::size_t character) {
    return derive_seed(seed, 0x63686172ULL, character);
}

template <typename Scalar>
void MultiHumanInput<Scalar>::validate() const {
    if (characters.empty()) {
        throw ConfigError("multi-human input has no characters");
    }
    const Index frames = characters.front().keypoints.frames();
    for (std::size_t c = 0; c < characters.size(); ++c) {
        const auto& ch = characters[c];
        if (ch.keypoints.frames() != frames) {
            throw ShapeError("character " + std::to_string(c) + " has " + std::to_string(ch.keypoints.frames()) +
                             " frames, expected " + std::to_string(frames));
        }
        check_presence(ch.presence, frames, "multi-human input");
        for (Index n = 0; n < frames; ++n) {
            if (present(ch.presence, n)) {
                continue;
            }
            const Index J = ch.keypoints.joints();
            if (!ch.keypoints.coords().middleRows(n * J, J).isZero(0) ||
                !ch.observed.coords().middleRows(n * J, J).isZero(0)) {
                throw ConfigError("character " + std::to_string(c) + " is absent in frame " + std::to_string(n) +
                                  " but its keypoints are not zero");
            }
        }
    }
}

template <typename Scalar>
std::vector<Estimate<Scalar>> estimate_multi(const MultiHumanInput<Scalar>& input,
                                             const std::vector<const FrozenTokens*>& frozen,
                                             const SamplerContext<Scalar>& ctx, const SamplerConfig& config,
                                             std::uint64_t seed) {
    input.validate();
    if (frozen.size() != input.characters.size()) {
        throw ConfigError("estimate_multi: one frozen token set per character is required");
    }
    std::vector<Estimate<Scalar>> out;
    out.reserve(input.characters.size());
    for (std::size_t c = 0; c < input.characters.size(); ++c) {
        out.push_back(estimate_single(input.characters[c], *frozen[c], ctx, config, character_seed(seed, c)));
    }
    return out;
}

#define POSEDIFF_INSTANTIATE_SAMPLER(S)                                                                          \
    template PoseSequence2D<S> reproject(const PoseSequence3D<S>&, const CameraIntrinsics&);                     \
    template struct HypothesisSet<S>;                                                                            \
    template HypothesisSet<S> sample_initial_hypotheses<S>(int, Index, Index, std::uint64_t);                    \
    template HypothesisSet<S> ddim_loop(const HypothesisSet<S>&, int, const NoiseSchedule&, const DenoiseFn<S>&, \
                                        bool);                                                                   \
    template std::vector<Matrix<double>> reprojection_errors(const std::vector<PoseSequence3D<S>>&,              \
                                                             const PoseSequence2D<double>&,                      \
                                                             const CameraIntrinsics&,                            \
                                                             const std::vector<std::uint8_t>&);                  \
    template PoseSequence3D<S> gather_joints(const HypothesisSet<S>&, const IndexMatrix&);                       \
    template JpmaResult<S> jpma_aggregate(const HypothesisSet<S>&, const PoseSequence2D<double>&,                \
                                          const CameraIntrinsics&, const JpmaOptions&,                           \
                                          const std::vector<std::uint8_t>&);                                     \
    template Placement<S> identity_placement<S>();                                                               \
    template Placement<S> translation_placement<S>(double);                                                      \
    template Estimate<S> estimate_single(const SequenceInput<S>&, const FrozenTokens&, const SamplerContext<S>&, \
                                         const SamplerConfig&, std::uint64_t);                                   \
    template struct MultiHumanInput<S>;                                                                          \
    template std::vector<Estimate<S>> estimate_multi(const MultiHumanInput<S>&,                                  \
                                                     const std::vector<const FrozenTokens*>&,                    \
                                                     const SamplerContext<S>&, const SamplerConfig&,             \
                                                     std::uint64_t);

POSEDIFF_INSTANTIATE_SAMPLER(float)
POSEDIFF_INSTANTIATE_SAMPLER(double)

#undef POSEDIFF_INSTANTIATE_SAMPLER

} // namespace posediff
