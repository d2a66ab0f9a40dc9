#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "posediff/tensor.hpp"

namespace posediff {

/// Operations a tape accepts. Everything except `custom` belongs to the
/// differentiable closed set; recording a `custom` node is rejected.
enum class OpKind {
    leaf,
    matmul,
    add,
    concat,
    softmax,
    layer_norm,
    gelu,
    hadamard,
    broadcast,
    mean,
    permute,
    linear,
    sqrt,
    custom,
};

bool in_closed_set(OpKind kind) noexcept;
const char* to_string(OpKind kind) noexcept;

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Matrix<Scalar>& value() const { return tape->value(id); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

/// Linear record of a forward computation; `backward` replays it in reverse.
/// A tape built with `record_gradients = false` only keeps values.
template <typename Scalar>
class Tape {
public:
    using Mat = Matrix<Scalar>;
    using BackwardFn = std::function<void(Tape&, int)>;

    explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }

    Var<Scalar> constant(Mat value);
    /// Trainable leaf. Gradients are reported under `name`.
    Var<Scalar> parameter(const std::string& name, Mat value);

    Var<Scalar> record(OpKind kind, Mat value, std::vector<int> parents, BackwardFn backward);

    /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and propagates to every leaf.
    void backward(Var<Scalar> loss);

    const Mat& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    /// Gradient buffer; zero-sized until something flows into the node.
    const Mat& grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).grad; }
    const Mat& grad(Var<Scalar> v) const { return grad(v.id); }
    /// Accumulation target for backward functions (allocated on first use).
    Mat& grad_buffer(int id);

    std::map<std::string, Mat> parameter_gradients() const;

    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(int id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        Mat value;
        Mat grad;
        bool needs_grad = false;
        BackwardFn backward;
        std::vector<int> parents;
        std::string name;
    };

    std::vector<Node> nodes_;
    bool recording_;
};

/// Query/key layout for grouped multi-head attention. Row block g of the
/// queries (query_len rows) attends to row block g of the keys (key_len rows),
/// or to the single key block when `shared_keys` is set.
struct AttentionLayout {
    Index heads = 1;
    Index groups = 1;
    Index query_len = 1;
    Index key_len = 1;
    bool shared_keys = false;
};

namespace ad {

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b);
/// x * w + b, with b a 1 x out row broadcast over rows.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b);
/// x * w (no bias)
template <typename S>
Var<S> linear(Var<S> x, Var<S> w);
template <typename S>
Var<S> add(Var<S> a, Var<S> b);
template <typename S>
Var<S> sub(Var<S> a, Var<S> b);
template <typename S>
Var<S> scale(Var<S> a, S factor);
/// Adds the 1 x D row `v` to every row of x.
template <typename S>
Var<S> add_row(Var<S> x, Var<S> v);
/// Row r of x gets row (r mod table.rows()) of table added.
template <typename S>
Var<S> add_tiled(Var<S> x, Var<S> table);
/// Row r of x gets row (r / repeat) of table added.
template <typename S>
Var<S> add_repeated(Var<S> x, Var<S> table, Index repeat);
template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b);
/// Scales column c of every row of x by v(0, c).
template <typename S>
Var<S> hadamard_row(Var<S> x, Var<S> v);
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5));
template <typename S>
Var<S> gelu(Var<S> x);
template <typename S>
Var<S> softmax_rows(Var<S> x);
/// out.row(i) = x.row(perm[i])
template <typename S>
Var<S> permute_rows(Var<S> x, std::vector<Index> perm);
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts);
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts);
/// 1 x D mean of the listed rows.
template <typename S>
Var<S> mean_rows(Var<S> x, std::vector<Index> rows);
/// 1 x 1 mean of all entries.
template <typename S>
Var<S> mean_all(Var<S> x);
template <typename S>
Var<S> sqrt(Var<S> x);
/// Stacked per-(group, head) score blocks, scaled by `scale`.
/// Result has groups * heads * query_len rows and key_len columns.
template <typename S>
Var<S> attention_scores(Var<S> q, Var<S> k, const AttentionLayout& layout, S scale);
/// Applies stacked attention weights to values; heads land in column blocks.
template <typename S>
Var<S> attention_apply(Var<S> weights, Var<S> v, const AttentionLayout& layout);

} // namespace ad

} // namespace posediff
