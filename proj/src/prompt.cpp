#include "posediff/prompt.hpp"

#include <cctype>

#include "posediff/rng.hpp"

namespace posediff {

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void check_frozen(const FrozenTokens& frozen, Index dim) {
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        if (frozen[k].rows() != kFrozenTokens || frozen[k].cols() != dim) {
            throw ShapeError("frozen tokens of prompt " + std::to_string(k + 1) + " must be 4x" + std::to_string(dim));
        }
    }
}

} // namespace

PromptSpec PromptSpec::for_action(const std::string& action) {
    PromptSpec spec;
    spec.texts[1] = action.empty() ? "motion" : action;
    return spec;
}

void PromptSpec::validate() const {
    Index total = 0;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        if (token_budget[k] < kFrozenTokens + 1) {
            throw ConfigError("prompt " + std::to_string(k + 1) + " budget " + std::to_string(token_budget[k]) +
                              " leaves no modifier row");
        }
        total += token_budget[k];
    }
    if (total != kPromptTokens) {
        throw ConfigError("prompt budgets sum to " + std::to_string(total) + ", expected 77");
    }
}

Index PromptSpec::offset(std::size_t k) const {
    Index at = 0;
    for (std::size_t i = 0; i < k; ++i) {
        at += token_budget[i];
    }
    return at;
}

std::vector<std::string> HashTextEncoder::tokenize(const std::string& text) {
    std::vector<std::string> tokens{"<sot>"};
    std::string word;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!word.empty()) {
            tokens.push_back(std::move(word));
            word.clear();
        }
    }
    if (!word.empty()) {
        tokens.push_back(std::move(word));
    }
    tokens.emplace_back("<eot>");
    if (tokens.size() > static_cast<std::size_t>(kPromptTokens)) {
        tokens.resize(static_cast<std::size_t>(kPromptTokens) - 1);
        tokens.emplace_back("<eot>");
    }
    while (tokens.size() < static_cast<std::size_t>(kPromptTokens)) {
        tokens.emplace_back("<pad>");
    }
    return tokens;
}

Matrix<double> HashTextEncoder::encode(const std::string& text) const {
    const auto tokens = tokenize(text);
    Matrix<double> out(static_cast<Index>(tokens.size()), dim_);
    std::uint64_t prev = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto h = fnv1a(tokens[i]);
        Rng rng(derive_seed(h, i, prev));
        for (Index c = 0; c < dim_; ++c) {
            out(static_cast<Index>(i), c) = rng.gaussian();
        }
        prev = h;
    }
    return out;
}

FrozenTokens encode_texts(const PromptSpec& spec, const TextEncoder& encoder) {
    FrozenTokens frozen;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        const auto rows = encoder.encode(spec.texts[k]);
        if (rows.rows() < kFrozenTokens) {
            throw EncodingError("prompt " + std::to_string(k + 1) + " ('" + spec.texts[k] + "') encoded to " +
                                std::to_string(rows.rows()) + " tokens, need at least 4");
        }
        if (rows.cols() != encoder.embed_dim()) {
            throw EncodingError("prompt " + std::to_string(k + 1) + " ('" + spec.texts[k] +
                                "') has the wrong embedding width");
        }
        frozen[k] = rows.topRows(kFrozenTokens);
    }
    return frozen;
}

FrozenTokens load_frozen_tokens(const TensorContainer& container, Index dim) {
    FrozenTokens frozen;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        const auto name = "prompt/" + std::to_string(k + 1) + "/frozen";
        if (!container.contains(name)) {
            throw LoadError("precomputed prompt embeddings lack '" + name + "'");
        }
        frozen[k] = container.matrix<double>(name);
    }
    check_frozen(frozen, dim);
    return frozen;
}

void store_frozen_tokens(TensorContainer& container, const FrozenTokens& frozen) {
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        container.put_matrix("prompt/" + std::to_string(k + 1) + "/frozen", frozen[k]);
    }
}

FrozenTokenSource::FrozenTokenSource(std::shared_ptr<const TextEncoder> encoder) : encoder_(std::move(encoder)) {
    if (!encoder_) {
        throw ConfigError("frozen token source needs an encoder");
    }
}

FrozenTokenSource::FrozenTokenSource(FrozenTokens fixed) : fixed_(std::move(fixed)) {}

Index FrozenTokenSource::embed_dim() const { return fixed_ ? (*fixed_)[0].cols() : encoder_->embed_dim(); }

const FrozenTokens& FrozenTokenSource::get(const PromptSpec& spec) {
    if (fixed_) {
        return *fixed_;
    }
    auto it = cache_.find(spec.texts);
    if (it == cache_.end()) {
        it = cache_.emplace(spec.texts, encode_texts(spec, *encoder_)).first;
    }
    return it->second;
}

template <typename Scalar>
std::map<std::string, Matrix<Scalar>> PromptBank<Scalar>::parameters() const {
    std::map<std::string, Matrix<Scalar>> out;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        out.emplace(parameter_name(k), modifiers[k]);
    }
    return out;
}

template <typename Scalar>
void PromptBank<Scalar>::assign(const std::map<std::string, Matrix<Scalar>>& params) {
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        auto it = params.find(parameter_name(k));
        if (it == params.end()) {
            continue;
        }
        if (it->second.rows() != modifiers[k].rows() || it->second.cols() != modifiers[k].cols()) {
            throw ShapeError("modifier '" + it->first + "' has the wrong shape");
        }
        modifiers[k] = it->second;
    }
}

template <typename Scalar>
PromptBank<Scalar> init_modifiers(const PromptSpec& spec, Index dim, std::uint64_t seed) {
    spec.validate();
    if (dim < 1) {
        throw ConfigError("prompt embedding width must be positive");
    }
    PromptBank<Scalar> bank;
    bank.embed_dim = dim;
    Rng rng(seed);
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        bank.modifiers[k] = rng.gaussian_matrix<Scalar>(spec.modifier_rows(k), dim, 0.02);
    }
    return bank;
}

std::vector<Index> pooled_rows(const PromptSpec& spec) {
    std::vector<Index> rows;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        rows.push_back(spec.offset(k) + spec.token_budget[k] - 1);
    }
    return rows;
}

template <typename Scalar>
RowVector<Scalar> pooled_prompt(const Matrix<Scalar>& tokens, const PromptSpec& spec) {
    if (tokens.rows() != kPromptTokens) {
        throw ShapeError("prompt matrix must have 77 rows, got " + std::to_string(tokens.rows()));
    }
    RowVector<Scalar> sum = RowVector<Scalar>::Zero(tokens.cols());
    for (Index r : pooled_rows(spec)) {
        sum += tokens.row(r);
    }
    return sum / static_cast<Scalar>(kPromptCount);
}

template <typename Scalar>
PromptEmbedding<Scalar> assemble_prompt(const PromptBank<Scalar>& bank, const FrozenTokens& frozen,
                                        const PromptSpec& spec) {
    spec.validate();
    const Index dim = bank.embed_dim;
    PromptEmbedding<Scalar> out;
    out.tokens.resize(kPromptTokens, dim);
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        const auto& mod = bank.modifiers[k];
        if (mod.rows() != spec.modifier_rows(k) || mod.cols() != dim || frozen[k].rows() != kFrozenTokens ||
            frozen[k].cols() != dim) {
            throw ShapeError("prompt " + std::to_string(k + 1) + ": modifier " + std::to_string(mod.rows()) + "x" +
                             std::to_string(mod.cols()) + " does not fit frozen tokens " +
                             std::to_string(frozen[k].rows()) + "x" + std::to_string(frozen[k].cols()));
        }
        const Index at = spec.offset(k);
        out.tokens.middleRows(at, mod.rows()) = mod;
        out.tokens.middleRows(at + mod.rows(), kFrozenTokens) = frozen[k].template cast<Scalar>();
    }
    out.pooled = pooled_prompt(out.tokens, spec);
    return out;
}

template <typename Scalar>
PromptVars<Scalar> bind_prompt(Tape<Scalar>& tape, const PromptBank<Scalar>& bank, const FrozenTokens& frozen,
                               const PromptSpec& spec) {
    spec.validate();
    std::vector<Var<Scalar>> parts;
    for (std::size_t k = 0; k < kPromptCount; ++k) {
        if (bank.modifiers[k].rows() != spec.modifier_rows(k) || bank.modifiers[k].cols() != frozen[k].cols()) {
            throw ShapeError("prompt " + std::to_string(k + 1) + ": modifier/frozen shape mismatch");
        }
        parts.push_back(tape.parameter(PromptBank<Scalar>::parameter_name(k), bank.modifiers[k]));
        parts.push_back(tape.constant(frozen[k].template cast<Scalar>()));
    }
    auto tokens = ad::concat_rows(parts);
    auto pooled = ad::mean_rows(tokens, pooled_rows(spec));
    return {tokens, pooled};
}

template struct PromptBank<float>;
template struct PromptBank<double>;
template PromptBank<float> init_modifiers<float>(const PromptSpec&, Index, std::uint64_t);
template PromptBank<double> init_modifiers<double>(const PromptSpec&, Index, std::uint64_t);
template RowVector<float> pooled_prompt(const Matrix<float>&, const PromptSpec&);
template RowVector<double> pooled_prompt(const Matrix<double>&, const PromptSpec&);
template PromptEmbedding<float> assemble_prompt(const PromptBank<float>&, const FrozenTokens&, const PromptSpec&);
template PromptEmbedding<double> assemble_prompt(const PromptBank<double>&, const FrozenTokens&, const PromptSpec&);
template PromptVars<float> bind_prompt(Tape<float>&, const PromptBank<float>&, const FrozenTokens&,
                                       const PromptSpec&);
template PromptVars<double> bind_prompt(Tape<double>&, const PromptBank<double>&, const FrozenTokens&,
                                        const PromptSpec&);

} // namespace posediff
