#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "posediff/autodiff.hpp"
#include "posediff/container.hpp"
#include "posediff/tensor.hpp"

namespace posediff {

inline constexpr std::size_t kPromptCount = 7;
inline constexpr Index kPromptTokens = 77;
inline constexpr Index kFrozenTokens = 4;

/// Seven prompt texts {person, action, speed, head, body, arms, legs} and the
/// token budget of each.
struct PromptSpec {
    std::array<std::string, kPromptCount> texts{"person", "motion", "speed", "head", "body", "arms", "legs"};
    std::array<Index, kPromptCount> token_budget{7, 12, 10, 10, 10, 14, 14};

    /// Default texts with `action` in the action-class slot ("motion" when empty).
    static PromptSpec for_action(const std::string& action);

    /// Throws ConfigError unless budgets sum to 77 and each is at least 5.
    void validate() const;
    Index modifier_rows(std::size_t k) const { return token_budget[k] - kFrozenTokens; }
    /// First row of prompt k inside the assembled 77-row matrix.
    Index offset(std::size_t k) const;
};

/// Frozen text encoder: a string maps to a sequence of embed_dim-wide token rows.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual Index embed_dim() const = 0;
    virtual Matrix<double> encode(const std::string& text) const = 0;
};

/// Deterministic stand-in for a pretrained encoder. Lower-cased words become
/// tokens framed by <sot>/<eot> and padded with <pad> to 77; each token row is
/// a unit Gaussian vector seeded from (token, position, previous token).
class HashTextEncoder final : public TextEncoder {
public:
    explicit HashTextEncoder(Index dim) : dim_(dim) {}
    Index embed_dim() const override { return dim_; }
    Matrix<double> encode(const std::string& text) const override;

    static std::vector<std::string> tokenize(const std::string& text);

private:
    Index dim_;
};

/// First four encoder rows for each of the seven prompts.
using FrozenTokens = std::array<Matrix<double>, kPromptCount>;

FrozenTokens encode_texts(const PromptSpec& spec, const TextEncoder& encoder);

/// Reads `prompt/<k>/frozen` (k = 1..7, each 4 x D) from a container.
FrozenTokens load_frozen_tokens(const TensorContainer& container, Index dim);
void store_frozen_tokens(TensorContainer& container, const FrozenTokens& frozen);

/// Supplies frozen tokens per PromptSpec, either by running an encoder
/// (cached by the action text) or from one fixed precomputed set.
class FrozenTokenSource {
public:
    explicit FrozenTokenSource(std::shared_ptr<const TextEncoder> encoder);
    explicit FrozenTokenSource(FrozenTokens fixed);

    Index embed_dim() const;
    /// Not thread-safe; warm the cache before sharing across threads.
    const FrozenTokens& get(const PromptSpec& spec);

private:
    std::shared_ptr<const TextEncoder> encoder_;
    std::optional<FrozenTokens> fixed_;
    std::map<std::array<std::string, kPromptCount>, FrozenTokens> cache_;
};

/// Learnable modifiers r_k, one (L_k - 4) x D block per prompt.
template <typename Scalar>
struct PromptBank {
    std::array<Matrix<Scalar>, kPromptCount> modifiers;
    Index embed_dim = 0;

    static std::string parameter_name(std::size_t k) { return "prompt/" + std::to_string(k + 1) + "/modifier"; }

    std::map<std::string, Matrix<Scalar>> parameters() const;
    void assign(const std::map<std::string, Matrix<Scalar>>& params);

    template <typename Other>
    PromptBank<Other> cast() const {
        PromptBank<Other> out;
        out.embed_dim = embed_dim;
        for (std::size_t k = 0; k < kPromptCount; ++k) {
            out.modifiers[k] = modifiers[k].template cast<Other>();
        }
        return out;
    }
};

/// Every modifier entry i.i.d. N(0, 0.02^2), reproducible by seed.
template <typename Scalar>
PromptBank<Scalar> init_modifiers(const PromptSpec& spec, Index dim, std::uint64_t seed);

/// Assembled 77 x D prompt matrix and its pooled row.
template <typename Scalar>
struct PromptEmbedding {
    Matrix<Scalar> tokens;
    RowVector<Scalar> pooled;
};

/// Rows of prompt k are [r_k; p~_k]; prompts stacked in spec order.
template <typename Scalar>
PromptEmbedding<Scalar> assemble_prompt(const PromptBank<Scalar>& bank, const FrozenTokens& frozen,
                                        const PromptSpec& spec);

/// Mean of the last row of each of the seven prompts.
template <typename Scalar>
RowVector<Scalar> pooled_prompt(const Matrix<Scalar>& tokens, const PromptSpec& spec);

/// Row indices that pooled_prompt averages.
std::vector<Index> pooled_rows(const PromptSpec& spec);

/// Prompt assembled on a tape: modifiers as parameters, frozen rows constant.
template <typename Scalar>
struct PromptVars {
    Var<Scalar> tokens;
    Var<Scalar> pooled;
};

template <typename Scalar>
PromptVars<Scalar> bind_prompt(Tape<Scalar>& tape, const PromptBank<Scalar>& bank, const FrozenTokens& frozen,
                               const PromptSpec& spec);

} // namespace posediff
