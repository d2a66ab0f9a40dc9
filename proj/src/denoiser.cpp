#include "posediff/denoiser.hpp"

#include <cmath>
#include <optional>

#include "posediff/rng.hpp"

namespace posediff {

void DenoiserConfig::validate() const {
    if (dim < 1 || heads < 1) {
        throw ConfigError("denoiser dim and heads must be positive");
    }
    if (dim % heads != 0) {
        throw ConfigError("denoiser dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (dim % 2 != 0) {
        throw ConfigError("denoiser dim must be even for the sinusoidal timestamp embedding");
    }
    if (frames < 1 || joints < 1) {
        throw ConfigError("denoiser frames and joints must be positive");
    }
    if (spatial_blocks < 0 || temporal_blocks < 0 || spatio_temporal_blocks < 0) {
        throw ConfigError("block counts must be non-negative");
    }
    if (!(mlp_ratio > 0.0)) {
        throw ConfigError("mlp_ratio must be positive");
    }
}

Index DenoiserConfig::hidden_dim() const {
    return std::max<Index>(1, static_cast<Index>(std::lround(mlp_ratio * static_cast<double>(dim))));
}

namespace {

void add_linear(std::map<std::string, TensorShape>& out, const std::string& prefix, Index in, Index out_dim,
                bool bias = true) {
    out[prefix + "/weight"] = {in, out_dim};
    if (bias) {
        out[prefix + "/bias"] = {1, out_dim};
    }
}

void add_block(std::map<std::string, TensorShape>& out, const std::string& prefix, Index dim, Index hidden) {
    out[prefix + "/ln1/gamma"] = {1, dim};
    out[prefix + "/ln1/beta"] = {1, dim};
    add_linear(out, prefix + "/attn/q", dim, dim);
    add_linear(out, prefix + "/attn/k", dim, dim);
    add_linear(out, prefix + "/attn/v", dim, dim);
    add_linear(out, prefix + "/attn/out", dim, dim);
    out[prefix + "/ln2/gamma"] = {1, dim};
    out[prefix + "/ln2/beta"] = {1, dim};
    add_linear(out, prefix + "/mlp/fc1", dim, hidden);
    add_linear(out, prefix + "/mlp/fc2", hidden, dim);
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

std::map<std::string, TensorShape> denoiser_layout(const DenoiserConfig& config) {
    config.validate();
    const Index d = config.dim;
    const Index hidden = config.hidden_dim();
    std::map<std::string, TensorShape> out;
    add_linear(out, "embed/input", 5, d);
    out["embed/spatial_pos"] = {config.joints, d};
    out["embed/temporal_pos"] = {config.frames, d};
    add_linear(out, "time/fc1", d, d);
    add_linear(out, "time/fc2", d, d);
    for (int i = 0; i < config.spatial_blocks; ++i) {
        add_block(out, "spatial/" + std::to_string(i), d, hidden);
    }
    if (config.use_prompt && config.use_fpc) {
        add_linear(out, "cross/q", d, d, false);
        add_linear(out, "cross/k", d, d, false);
        add_linear(out, "cross/v", d, d, false);
        add_linear(out, "cross/out", d, d);
    }
    if (config.use_pts) {
        add_linear(out, "pts/phi", d, d);
        add_linear(out, "pts/scale", d, d);
        add_linear(out, "pts/shift", d, d);
    }
    for (int i = 0; i < config.temporal_blocks; ++i) {
        add_block(out, "temporal/" + std::to_string(i), d, hidden);
    }
    for (int i = 0; i < config.spatio_temporal_blocks; ++i) {
        add_block(out, "st/" + std::to_string(i) + "/spatial", d, hidden);
        add_block(out, "st/" + std::to_string(i) + "/temporal", d, hidden);
    }
    add_linear(out, "head", d, 3);
    return out;
}

template <typename Scalar>
DenoiserWeights<Scalar>::DenoiserWeights(DenoiserConfig config, std::map<std::string, Matrix<Scalar>> tensors)
    : config_(std::move(config)), tensors_(std::move(tensors)) {
    validate();
}

template <typename Scalar>
DenoiserWeights<Scalar> DenoiserWeights<Scalar>::init(const DenoiserConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    std::map<std::string, Matrix<Scalar>> tensors;
    for (const auto& [name, shape] : denoiser_layout(config)) {
        const auto [rows, cols] = shape;
        Matrix<Scalar> m;
        if (name == "pts/scale/bias" || ends_with(name, "/gamma")) {
            m = Matrix<Scalar>::Ones(rows, cols);
        } else if (ends_with(name, "/bias") || ends_with(name, "/beta")) {
            m = Matrix<Scalar>::Zero(rows, cols);
        } else if (ends_with(name, "_pos")) {
            m = rng.gaussian_matrix<Scalar>(rows, cols, 0.02);
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
            m.resize(rows, cols);
            for (Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
            }
        }
        tensors.emplace(name, std::move(m));
    }
    return {config, std::move(tensors)};
}

template <typename Scalar>
const Matrix<Scalar>& DenoiserWeights<Scalar>::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw LookupError("denoiser has no tensor '" + name + "'");
    }
    return it->second;
}

template <typename Scalar>
Matrix<Scalar>& DenoiserWeights<Scalar>::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw LookupError("denoiser has no tensor '" + name + "'");
    }
    return it->second;
}

template <typename Scalar>
void DenoiserWeights<Scalar>::validate() const {
    const auto layout = denoiser_layout(config_);
    if (layout.size() != tensors_.size()) {
        throw ShapeError("denoiser has " + std::to_string(tensors_.size()) + " tensors, layout expects " +
                         std::to_string(layout.size()));
    }
    for (const auto& [name, shape] : layout) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw ShapeError("denoiser tensor '" + name + "' is missing");
        }
        if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
            throw ShapeError("denoiser tensor '" + name + "' is " + std::to_string(it->second.rows()) + "x" +
                             std::to_string(it->second.cols()) + ", expected " + std::to_string(shape.first) + "x" +
                             std::to_string(shape.second));
        }
    }
}

template <typename Scalar>
bool DenoiserWeights<Scalar>::all_finite() const {
    for (const auto& [_, m] : tensors_) {
        if (!m.allFinite()) {
            return false;
        }
    }
    return true;
}

template <typename Scalar>
Var<Scalar> ParameterBinder<Scalar>::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) {
        return it->second;
    }
    auto p = params_.find(name);
    if (p == params_.end()) {
        throw LookupError("parameter '" + name + "' is not available");
    }
    auto var = tape_.parameter(name, p->second);
    bound_.emplace(name, var);
    return var;
}

template <typename Scalar>
RowVector<Scalar> sinusoidal_embedding(double t, Index dim) {
    RowVector<Scalar> out(dim);
    const Index half = dim / 2;
    for (Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out(2 * i) = static_cast<Scalar>(std::sin(t * freq));
        out(2 * i + 1) = static_cast<Scalar>(std::cos(t * freq));
    }
    if (dim % 2 != 0) {
        out(dim - 1) = Scalar(0);
    }
    return out;
}

template <typename Scalar>
Var<Scalar> timestamp_embed(ParameterBinder<Scalar>& bind, double t, Index dim) {
    auto base = bind.tape().constant(sinusoidal_embedding<Scalar>(t, dim));
    auto h = ad::gelu(ad::linear(base, bind("time/fc1/weight"), bind("time/fc1/bias")));
    return ad::linear(h, bind("time/fc2/weight"), bind("time/fc2/bias"));
}

std::vector<Index> frame_to_joint_major(Index frames, Index joints) {
    std::vector<Index> perm(static_cast<std::size_t>(frames * joints));
    for (Index j = 0; j < joints; ++j) {
        for (Index n = 0; n < frames; ++n) {
            perm[static_cast<std::size_t>(j * frames + n)] = n * joints + j;
        }
    }
    return perm;
}

std::vector<Index> joint_to_frame_major(Index frames, Index joints) {
    std::vector<Index> perm(static_cast<std::size_t>(frames * joints));
    for (Index n = 0; n < frames; ++n) {
        for (Index j = 0; j < joints; ++j) {
            perm[static_cast<std::size_t>(n * joints + j)] = j * frames + n;
        }
    }
    return perm;
}

template <typename Scalar>
FeatureTensor<Scalar> embed_input(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                  const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x,
                                  Var<Scalar> conditioning) {
    if (yt.frames() != x.frames() || yt.joints() != x.joints()) {
        throw ShapeError("embed_input: noisy pose is " + std::to_string(yt.frames()) + "x" +
                         std::to_string(yt.joints()) + " but keypoints are " + std::to_string(x.frames()) + "x" +
                         std::to_string(x.joints()));
    }
    if (yt.joints() != config.joints) {
        throw ShapeError("embed_input: " + std::to_string(yt.joints()) + " joints, model expects " +
                         std::to_string(config.joints));
    }
    Matrix<Scalar> joined(yt.frames() * yt.joints(), 5);
    joined.leftCols(3) = yt.coords();
    joined.rightCols(2) = x.coords();
    auto& tape = bind.tape();
    auto z = ad::linear(tape.constant(std::move(joined)), bind("embed/input/weight"), bind("embed/input/bias"));
    z = ad::add_tiled(z, bind("embed/spatial_pos"));
    z = ad::add_row(z, conditioning);
    return {z, yt.frames(), yt.joints(), FeatureStage::input};
}

template <typename Scalar>
FeatureTensor<Scalar> mhsa_block(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                 const std::string& prefix, FeatureTensor<Scalar> features, AttentionAxis axis,
                                 Var<Scalar>* attention_out) {
    const Index frames = features.frames;
    const Index joints = features.joints;
    auto h = features.data;
    AttentionLayout layout;
    layout.heads = config.heads;
    if (axis == AttentionAxis::spatial) {
        layout.groups = frames;
        layout.query_len = layout.key_len = joints;
    } else {
        h = ad::permute_rows(h, frame_to_joint_major(frames, joints));
        layout.groups = joints;
        layout.query_len = layout.key_len = frames;
    }
    auto normed = ad::layer_norm(h, bind(prefix + "/ln1/gamma"), bind(prefix + "/ln1/beta"));
    auto q = ad::linear(normed, bind(prefix + "/attn/q/weight"), bind(prefix + "/attn/q/bias"));
    auto k = ad::linear(normed, bind(prefix + "/attn/k/weight"), bind(prefix + "/attn/k/bias"));
    auto v = ad::linear(normed, bind(prefix + "/attn/v/weight"), bind(prefix + "/attn/v/bias"));
    const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(config.head_dim())));
    auto weights = ad::softmax_rows(ad::attention_scores(q, k, layout, scale));
    if (attention_out != nullptr) {
        *attention_out = weights;
    }
    auto attended = ad::attention_apply(weights, v, layout);
    h = ad::add(h, ad::linear(attended, bind(prefix + "/attn/out/weight"), bind(prefix + "/attn/out/bias")));
    auto normed2 = ad::layer_norm(h, bind(prefix + "/ln2/gamma"), bind(prefix + "/ln2/beta"));
    auto mlp = ad::gelu(ad::linear(normed2, bind(prefix + "/mlp/fc1/weight"), bind(prefix + "/mlp/fc1/bias")));
    h = ad::add(h, ad::linear(mlp, bind(prefix + "/mlp/fc2/weight"), bind(prefix + "/mlp/fc2/bias")));
    if (axis == AttentionAxis::temporal) {
        h = ad::permute_rows(h, joint_to_frame_major(frames, joints));
    }
    if (!h.value().allFinite()) {
        throw NumericalError("non-finite activations in block '" + prefix + "'");
    }
    features.data = h;
    features.stage = axis == AttentionAxis::spatial ? FeatureStage::spatial : FeatureStage::temporal;
    return features;
}

template <typename Scalar>
FeatureTensor<Scalar> prompt_cross_attention(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                             FeatureTensor<Scalar> features, Var<Scalar> prompt_tokens,
                                             Var<Scalar>* attention_out) {
    if (prompt_tokens.rows() != kPromptTokens) {
        throw ShapeError("cross-attention needs 77 prompt rows, got " + std::to_string(prompt_tokens.rows()));
    }
    if (prompt_tokens.cols() != config.dim || features.data.cols() != config.dim) {
        throw ConfigError("cross-attention: prompt width " + std::to_string(prompt_tokens.cols()) +
                          " and feature width " + std::to_string(features.data.cols()) + " must equal D = " +
                          std::to_string(config.dim));
    }
    AttentionLayout layout;
    layout.heads = config.heads;
    layout.groups = 1;
    layout.query_len = features.data.rows();
    layout.key_len = kPromptTokens;
    layout.shared_keys = true;
    auto q = ad::linear(features.data, bind("cross/q/weight"));
    auto k = ad::linear(prompt_tokens, bind("cross/k/weight"));
    auto v = ad::linear(prompt_tokens, bind("cross/v/weight"));
    const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(config.head_dim())));
    auto weights = ad::softmax_rows(ad::attention_scores(q, k, layout, scale));
    if (attention_out != nullptr) {
        *attention_out = weights;
    }
    auto attended = ad::attention_apply(weights, v, layout);
    features.data =
        ad::add(features.data, ad::linear(attended, bind("cross/out/weight"), bind("cross/out/bias")));
    features.stage = FeatureStage::prompt_attended;
    return features;
}

template <typename Scalar>
FeatureTensor<Scalar> pts_stylize(ParameterBinder<Scalar>& bind, FeatureTensor<Scalar> features,
                                  Var<Scalar> style) {
    auto projected = ad::linear(style, bind("pts/phi/weight"), bind("pts/phi/bias"));
    auto gain = ad::linear(projected, bind("pts/scale/weight"), bind("pts/scale/bias"));
    auto offset = ad::linear(projected, bind("pts/shift/weight"), bind("pts/shift/bias"));
    features.data = ad::add_row(ad::hadamard_row(features.data, gain), offset);
    features.stage = FeatureStage::stylized;
    return features;
}

template <typename Scalar>
FeatureTensor<Scalar> spatio_temporal_stack(ParameterBinder<Scalar>& bind, const DenoiserConfig& config,
                                            FeatureTensor<Scalar> features) {
    for (int i = 0; i < config.spatio_temporal_blocks; ++i) {
        const auto prefix = "st/" + std::to_string(i);
        features = mhsa_block(bind, config, prefix + "/spatial", features, AttentionAxis::spatial);
        features = mhsa_block(bind, config, prefix + "/temporal", features, AttentionAxis::temporal);
    }
    features.stage = FeatureStage::output;
    return features;
}

template <typename Scalar>
Var<Scalar> decode_head(ParameterBinder<Scalar>& bind, const FeatureTensor<Scalar>& features) {
    return ad::linear(features.data, bind("head/weight"), bind("head/bias"));
}

template <typename Scalar>
Var<Scalar> denoise_on_tape(Tape<Scalar>& tape, const DenoiserConfig& config,
                            const std::map<std::string, Matrix<Scalar>>& params, const PromptInputs<Scalar>& prompt,
                            const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x, int t) {
    if (yt.frames() != config.frames) {
        throw ShapeError("denoiser expects " + std::to_string(config.frames) + " frames, got " +
                         std::to_string(yt.frames()));
    }
    ParameterBinder<Scalar> bind(tape, params);
    auto temb = timestamp_embed(bind, static_cast<double>(t), config.dim);

    std::optional<PromptVars<Scalar>> pv;
    if (config.use_prompt) {
        if (prompt.bank == nullptr || prompt.frozen == nullptr || prompt.spec == nullptr) {
            throw ConfigError("prompt-conditioned denoiser called without a prompt");
        }
        if (prompt.bank->embed_dim != config.dim) {
            throw ConfigError("prompt width " + std::to_string(prompt.bank->embed_dim) + " != model width " +
                              std::to_string(config.dim));
        }
        pv = bind_prompt(tape, *prompt.bank, *prompt.frozen, *prompt.spec);
    }
    // v = P[L] + F(t); without prompts only the timestamp term remains
    auto conditioning = pv ? ad::add(pv->pooled, temb) : temb;

    auto f = embed_input(bind, config, yt, x, conditioning);
    for (int i = 0; i < config.spatial_blocks; ++i) {
        f = mhsa_block(bind, config, "spatial/" + std::to_string(i), f, AttentionAxis::spatial);
    }
    if (pv && config.use_fpc) {
        f = prompt_cross_attention(bind, config, f, pv->tokens);
    }
    if (config.use_pts) {
        f = pts_stylize(bind, f, conditioning);
    }
    f.data = ad::add_repeated(f.data, bind("embed/temporal_pos"), config.joints);
    for (int i = 0; i < config.temporal_blocks; ++i) {
        f = mhsa_block(bind, config, "temporal/" + std::to_string(i), f, AttentionAxis::temporal);
    }
    f = spatio_temporal_stack(bind, config, f);
    return decode_head(bind, f);
}

template <typename Scalar>
PoseSequence3D<Scalar> denoise(const DenoiserWeights<Scalar>& weights, const PromptInputs<Scalar>& prompt,
                               const PoseSequence3D<Scalar>& yt, const PoseSequence2D<Scalar>& x, int t) {
    Tape<Scalar> tape(false);
    auto out = denoise_on_tape(tape, weights.config(), weights.tensors(), prompt, yt, x, t);
    typename PoseSequence3D<Scalar>::Coords coords = out.value();
    return {yt.frames(), yt.joints(), std::move(coords)};
}

template <typename Scalar>
std::map<std::string, Matrix<Scalar>> merge_parameters(const DenoiserWeights<Scalar>& weights,
                                                       const PromptBank<Scalar>& bank) {
    auto out = weights.tensors();
    for (auto& [name, m] : bank.parameters()) {
        out.emplace(name, m);
    }
    return out;
}

#define POSEDIFF_INSTANTIATE_DENOISER(S)                                                                         \
    template class DenoiserWeights<S>;                                                                           \
    template class ParameterBinder<S>;                                                                           \
    template RowVector<S> sinusoidal_embedding<S>(double, Index);                                                \
    template Var<S> timestamp_embed(ParameterBinder<S>&, double, Index);                                         \
    template FeatureTensor<S> embed_input(ParameterBinder<S>&, const DenoiserConfig&, const PoseSequence3D<S>&,   \
                                          const PoseSequence2D<S>&, Var<S>);                                     \
    template FeatureTensor<S> mhsa_block(ParameterBinder<S>&, const DenoiserConfig&, const std::string&,          \
                                         FeatureTensor<S>, AttentionAxis, Var<S>*);                              \
    template FeatureTensor<S> prompt_cross_attention(ParameterBinder<S>&, const DenoiserConfig&,                 \
                                                     FeatureTensor<S>, Var<S>, Var<S>*);                         \
    template FeatureTensor<S> pts_stylize(ParameterBinder<S>&, FeatureTensor<S>, Var<S>);                        \
    template FeatureTensor<S> spatio_temporal_stack(ParameterBinder<S>&, const DenoiserConfig&, FeatureTensor<S>); \
    template Var<S> decode_head(ParameterBinder<S>&, const FeatureTensor<S>&);                                   \
    template Var<S> denoise_on_tape(Tape<S>&, const DenoiserConfig&, const std::map<std::string, Matrix<S>>&,    \
                                    const PromptInputs<S>&, const PoseSequence3D<S>&, const PoseSequence2D<S>&,  \
                                    int);                                                                        \
    template PoseSequence3D<S> denoise(const DenoiserWeights<S>&, const PromptInputs<S>&,                        \
                                       const PoseSequence3D<S>&, const PoseSequence2D<S>&, int);                 \
    template std::map<std::string, Matrix<S>> merge_parameters(const DenoiserWeights<S>&, const PromptBank<S>&);

POSEDIFF_INSTANTIATE_DENOISER(float)
POSEDIFF_INSTANTIATE_DENOISER(double)

#undef POSEDIFF_INSTANTIATE_DENOISER

} // namespace posediff
