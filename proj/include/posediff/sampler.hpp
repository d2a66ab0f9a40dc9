#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "posediff/denoiser.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/prompt.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

/// Pinhole intrinsics in pixels.
struct CameraIntrinsics {
    double fx = 1000.0;
    double fy = 1000.0;
    double cx = 0.0;
    double cy = 0.0;

    void validate() const;
    /// fx = fy = 1000 with the principal point at the image center.
    static CameraIntrinsics fallback(double width, double height);
    friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

inline constexpr double kDepthEpsilon = 1e-6;

using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// u = fx X / Z + cx, v = fy Y / Z + cy. Throws DegenerateError naming the
/// first frame/joint whose depth is at most kDepthEpsilon.
template <typename Scalar>
PoseSequence2D<Scalar> reproject(const PoseSequence3D<Scalar>& pose, const CameraIntrinsics& cam);

template <typename Scalar>
struct HypothesisSet {
    std::vector<PoseSequence3D<Scalar>> hypotheses;
    std::uint64_t seed_base = 0;

    std::size_t size() const noexcept { return hypotheses.size(); }
    void validate() const;
};

/// Hypothesis h is unit Gaussian noise drawn from derive_seed(seed, h, 0).
template <typename Scalar>
HypothesisSet<Scalar> sample_initial_hypotheses(int count, Index frames, Index joints, std::uint64_t seed);

/// Y0_hat = D(Y_t, t) for a fixed 2D input and prompt.
template <typename Scalar>
using DenoiseFn = std::function<PoseSequence3D<Scalar>(const PoseSequence3D<Scalar>&, int)>;

/// Iteration m = 1..M denoises at t = round(T(1 - (m-1)/M)); every iteration but
/// the last then steps to the next timestamp with noise derive_seed(seed_base, h, m).
/// The result holds the final Y0_hat of each hypothesis.
template <typename Scalar>
HypothesisSet<Scalar> ddim_loop(const HypothesisSet<Scalar>& initial, int iterations, const NoiseSchedule& sched,
                                const DenoiseFn<Scalar>& denoise, bool deterministic = false);

struct JpmaOptions {
    /// Argmin per (frame, joint) instead of per joint trajectory.
    bool per_frame = false;
};

/// Per hypothesis an N x J matrix of ||P_R(Y^h)[n, j] - X[n, j]||. Frames with
/// presence 0 are skipped (left at zero). `presence` may be empty. A joint at
/// depth <= kDepthEpsilon scores +inf instead of failing the whole set.
template <typename Scalar>
std::vector<Matrix<double>> reprojection_errors(const std::vector<PoseSequence3D<Scalar>>& placed,
                                                const PoseSequence2D<double>& observed, const CameraIntrinsics& cam,
                                                const std::vector<std::uint8_t>& presence = {});

/// Winning hypothesis per (frame, joint). Per joint the error is summed over
/// frames unless per_frame is set. Ties go to the lowest hypothesis index.
IndexMatrix jpma_select(const std::vector<Matrix<double>>& errors, const JpmaOptions& options);

/// Copies joint (n, j) of hypothesis index(n, j).
template <typename Scalar>
PoseSequence3D<Scalar> gather_joints(const HypothesisSet<Scalar>& hyps, const IndexMatrix& index);

template <typename Scalar>
struct JpmaResult {
    PoseSequence3D<Scalar> pose;
    IndexMatrix hypothesis_index;
};

/// Hypotheses are already in camera coordinates.
template <typename Scalar>
JpmaResult<Scalar> jpma_aggregate(const HypothesisSet<Scalar>& hyps, const PoseSequence2D<double>& observed,
                                  const CameraIntrinsics& cam, const JpmaOptions& options = {},
                                  const std::vector<std::uint8_t>& presence = {});

/// Per-frame translation T minimizing the linearized reprojection residual
/// (u - cx)(Z + Tz) = fx (X + Tx) over present joints of that frame.
Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> solve_root_translation(
    const PoseSequence3D<double>& relative, const PoseSequence2D<double>& observed, const CameraIntrinsics& cam,
    const std::vector<std::uint8_t>& presence = {});

/// relative + solve_root_translation(relative, ...) on present frames.
PoseSequence3D<double> place_in_camera(const PoseSequence3D<double>& relative, const PoseSequence2D<double>& observed,
                                       const CameraIntrinsics& cam, const std::vector<std::uint8_t>& presence = {});

/// One person's inference input.
template <typename Scalar>
struct SequenceInput {
    PoseSequence2D<Scalar> keypoints;  // denoiser input (normalized)
    PoseSequence2D<double> observed;   // pixels, for reprojection
    CameraIntrinsics camera;
    std::vector<std::uint8_t> presence;  // empty means every frame present
    PromptSpec prompt;
};

/// Maps a denoiser-space pose to camera coordinates for reprojection.
template <typename Scalar>
using Placement = std::function<PoseSequence3D<double>(const PoseSequence3D<Scalar>&, const SequenceInput<Scalar>&)>;

/// Model output taken as camera coordinates as-is.
template <typename Scalar>
Placement<Scalar> identity_placement();

/// Scales by `scale` (model units to mm) then solves the root translation.
template <typename Scalar>
Placement<Scalar> translation_placement(double scale);

struct SamplerConfig {
    int hypotheses = 20;
    int iterations = 10;
    bool deterministic = false;
    JpmaOptions jpma;

    void validate() const;
};

/// Everything fixed across hypotheses and characters.
template <typename Scalar>
struct SamplerContext {
    const DenoiserWeights<Scalar>* weights = nullptr;
    const PromptBank<Scalar>* bank = nullptr;
    const NoiseSchedule* schedule = nullptr;
    Placement<Scalar> placement;
};

template <typename Scalar>
struct Estimate {
    PoseSequence3D<Scalar> pose;
    IndexMatrix hypothesis_index;
};

/// sample_initial_hypotheses -> ddim_loop -> JPMA on placed hypotheses.
/// Absent frames come back as zeros.
template <typename Scalar>
Estimate<Scalar> estimate_single(const SequenceInput<Scalar>& input, const FrozenTokens& frozen,
                                 const SamplerContext<Scalar>& ctx, const SamplerConfig& config, std::uint64_t seed);

/// Seed used for character c under a base seed.
std::uint64_t character_seed(std::uint64_t seed, std::size_t character);

template <typename Scalar>
struct MultiHumanInput {
    std::vector<SequenceInput<Scalar>> characters;

    /// At least one character, shared frame count, zero keypoints where absent.
    void validate() const;
};

/// Characters are estimated independently with character_seed(seed, c);
/// frozen[c] belongs to character c.
template <typename Scalar>
std::vector<Estimate<Scalar>> estimate_multi(const MultiHumanInput<Scalar>& input,
                                             const std::vector<const FrozenTokens*>& frozen,
                                             const SamplerContext<Scalar>& ctx, const SamplerConfig& config,
                                             std::uint64_t seed);

} // namespace posediff
