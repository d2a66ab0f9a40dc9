#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "posediff/autodiff.hpp"
#include "posediff/prompt.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

struct DenoiserConfig {
    Index dim = 512;
    Index heads = 8;
    int spatial_blocks = 1;
    int temporal_blocks = 1;
    int spatio_temporal_blocks = 3;
    Index frames = 243;
    Index joints = 17;
    double mlp_ratio = 2.0;
    // ablation switches: prompt conditioning as a whole, cross-attention, stylization
    bool use_prompt = true;
    bool use_fpc = true;
    bool use_pts = true;

    void validate() const;
    Index head_dim() const { return dim / heads; }
    Index hidden_dim() const;
};

using TensorShape = std::pair<Index, Index>;

/// Canonical tensor names and shapes for a configuration, in sorted order.
std::map<std::string, TensorShape> denoiser_layout(const DenoiserConfig& config);

/// Named-tensor map of every learnable denoiser parameter.
template <typename Scalar>
class DenoiserWeights {
public:
    DenoiserWeights() = default;
    DenoiserWeights(DenoiserConfig config, std::map<std::string, Matrix<Scalar>> tensors);

    /// Xavier-uniform projections, zero biases, unit norm scales, N(0, 0.02^2)
    /// positional tables, and a unit bias on the stylization scale.
    static DenoiserWeights init(const DenoiserConfig& config, std::uint64_t seed);

    const DenoiserConfig& config() const noexcept { return config_; }
    const std::map<std::string, Matrix<Scalar>>& tensors() const noexcept { return tensors_; }
    std::map<std::string, Matrix<Scalar>>& tensors() noexcept { return tensors_; }
    const Matrix<Scalar>& at(const std::string& name) const;
    Matrix<Scalar>& at(const std::string& name);

    /// Names and shapes match the layout; throws ShapeError otherwise.
    void validate() const;
    bool all_finite() const;

    template <typename Other>
    DenoiserWeights<Other> cast() const {
        std::map<std::string, Matrix<Other>> out;
        for (const auto& [name, m] : tensors_) {
            out.emplace(name, m.template cast<Other>());
        }
        return {config_, std::move(out)};
    }

private:
    DenoiserConfig config_;
    std::map<std::string, Matrix<Scalar>> tensors_;
};

/// Binds named parameters onto a tape once each, so repeated uses share a leaf.
template <typename Scalar>
class ParameterBinder {
public:
    ParameterBinder(Tape<Scalar>& tape, const std::map<std::string, Matrix<Scalar>>& params)
        : tape_(tape), params_(params) {}

    Var<Scalar> operator()(const std::string& name);
    Tape<Scalar>& tape() noexcept { return tape_; }

private:
    Tape<Scalar>& tape_;
    const std::map<std::string, Matrix<Scalar>>& params_;
    std::map<std::string, Var<Scalar>> bound_;
};

enum class FeatureStage { input, spatial, prompt_attended, stylized, temporal, output };

/// (frames * joints) x D token features, frame-major.
template <typename Scalar>
struct FeatureTensor {
    Var<Scalar> data;
    Index frames = 0;
    Index joints = 0;
    FeatureStage stage = FeatureStage::input;
};

enum class AttentionAxis { spatial, temporal };

/// Alternating [sin, cos] pairs over geometric frequencies 10000^(-i / (D/2)).
template <typename Scalar>
RowVector<Scalar> sinusoidal_embedding(double t, Index dim);

/// Sinusoid followed by linear -> GELU -> linear (1 x D).
template <typename Scalar>
Var<Scalar> timestamp_embed(ParameterBinder<Scalar>& bind, double t, Index dim);

/// Row permutation taking frame-major tokens to joint-major order.
std::vector<Index> frame_to_joint_major(Index frames, Index joints);
std::vector<Index> joint_to_frame_major(Index frames, Index joints);

/// Concat(Y_t, X) projected to D per token, plus the spatial positional table
/// and the 1 x D conditioning row (pooled prompt + timestamp embedding).
template <typename Scalar>
FeatureTensor<Scalar> embed_input(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                  const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x,
                                  Var<Scalar> conditioning);

/// Pre-norm transformer block (attention then MLP) under parameter prefix
/// `prefix`. Temporal blocks permute to joint-major and back.
/// `attention_out`, when given, receives the softmax weights.
template <typename Scalar>
FeatureTensor<Scalar> mhsa_block(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                 const std::string& prefix, FeatureTensor<Scalar> features, AttentionAxis axis,
                                 Var<Scalar>* attention_out = nullptr);

/// Pose tokens query the 77 prompt rows; output = F + (softmax(QK^T/sqrt(d)) V) W_O + b_O.
template <typename Scalar>
FeatureTensor<Scalar> prompt_cross_attention(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                             FeatureTensor<Scalar> features, Var<Scalar> prompt_tokens,
                                             Var<Scalar>* attention_out = nullptr);

/// F * psi_w(phi(v)) + psi_b(phi(v)) with v the 1 x D style row.
template <typename Scalar>
FeatureTensor<Scalar> pts_stylize(ParameterBinder<Scalar>& bind, FeatureTensor<Scalar> features,
                                  Var<Scalar> style);

template <typename Scalar>
FeatureTensor<Scalar> spatio_temporal_stack(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                            FeatureTensor<Scalar> features);

/// Linear D -> 3 per token.
template <typename Scalar>
Var<Scalar> decode_head(ParameterBinder<Scalar>& bind, const FeatureTensor<Scalar>& features);

/// Everything the prompt path needs for one sequence.
template <typename Scalar>
struct PromptInputs {
    const PromptBank<Scalar>* bank = nullptr;
    const FrozenTokens* frozen = nullptr;
    const PromptSpec* spec = nullptr;
};

/// Full denoiser forward on a tape: returns the (N*J) x 3 prediction of Y0.
/// Parameters are read from `params` (denoiser tensors plus prompt modifiers).
template <typename Scalar>
Var<Scalar> denoise_on_tape(Tape<Scalar>& tape, const DenoiserConfig& config,
                            const std::map<std::string, Matrix<Scalar>>& params, const PromptInputs<Scalar>& prompt,
                            const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x, int t);

/// Pure inference entry point: Y0_hat = D(Y_t, X, t, P).
template <typename Scalar>
PoseSequence3D<Scalar> denoise(const DenoiserWeights<Scalar>& weights, const PromptInputs<Scalar>& prompt,
                               const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x, int t);

/// Denoiser tensors and prompt modifiers in one map (the trainable set).
template <typename Scalar>
std::map<std::string, Matrix<Scalar>> merge_parameters(const DenoiserWeights<Scalar>& weights,
                                                       const PromptBank<Scalar>& bank);

} // namespace posediff
