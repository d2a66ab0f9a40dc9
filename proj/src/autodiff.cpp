#include "posediff/autodiff.hpp"

#include <cmath>
#include <numbers>

namespace posediff {

bool in_closed_set(OpKind kind) noexcept { return kind != OpKind::custom; }

const char* to_string(OpKind kind) noexcept {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::concat: return "concat";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::hadamard: return "hadamard";
    case OpKind::broadcast: return "broadcast";
    case OpKind::mean: return "mean";
    case OpKind::permute: return "permute";
    case OpKind::linear: return "linear";
    case OpKind::sqrt: return "sqrt";
    case OpKind::custom: return "custom";
    }
    return "unknown";
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value) {
    Node node;
    node.kind = OpKind::leaf;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(const std::string& name, Mat value) {
    Node node;
    node.kind = OpKind::leaf;
    node.value = std::move(value);
    node.needs_grad = recording_;
    node.name = name;
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(OpKind kind, Mat value, std::vector<int> parents, BackwardFn backward) {
    if (!in_closed_set(kind)) {
        throw UnsupportedOpError(std::string("operation '") + to_string(kind) +
                                 "' is outside the differentiable op set");
    }
    Node node;
    node.kind = kind;
    node.value = std::move(value);
    if (recording_) {
        for (int p : parents) {
            if (nodes_.at(static_cast<std::size_t>(p)).needs_grad) {
                node.needs_grad = true;
                break;
            }
        }
    }
    if (node.needs_grad) {
        node.backward = std::move(backward);
        node.parents = std::move(parents);
    }
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
typename Tape<Scalar>::Mat& Tape<Scalar>::grad_buffer(int id) {
    auto& node = nodes_.at(static_cast<std::size_t>(id));
    if (node.grad.size() == 0) {
        node.grad = Mat::Zero(node.value.rows(), node.value.cols());
    }
    return node.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
    if (loss.tape != this) {
        throw InvariantViolation("backward called with a node from another tape");
    }
    if (loss.rows() != 1 || loss.cols() != 1) {
        throw ShapeError("backward needs a 1x1 loss node");
    }
    if (!recording_) {
        throw InvariantViolation("backward on a tape that does not record gradients");
    }
    grad_buffer(loss.id)(0, 0) += Scalar(1);
    for (int id = loss.id; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.needs_grad || !node.backward || node.grad.size() == 0) {
            continue;
        }
        node.backward(*this, id);
    }
}

template <typename Scalar>
std::map<std::string, typename Tape<Scalar>::Mat> Tape<Scalar>::parameter_gradients() const {
    std::map<std::string, Mat> out;
    for (const auto& node : nodes_) {
        if (node.kind != OpKind::leaf || node.name.empty()) {
            continue;
        }
        Mat g = node.grad.size() == 0 ? Mat::Zero(node.value.rows(), node.value.cols()) : node.grad;
        auto [it, inserted] = out.emplace(node.name, g);
        if (!inserted) {
            it->second += g;
        }
    }
    return out;
}

template class Tape<float>;
template class Tape<double>;

namespace ad {
namespace {

template <typename S>
bool tracks(std::initializer_list<Var<S>> vars) {
    for (const auto& v : vars) {
        if (v.tape->recording() && v.tape->needs_grad(v.id)) {
            return true;
        }
    }
    return false;
}

template <typename S>
void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ShapeError(what);
    }
}

std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

} // namespace

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    require<S>(a.cols() == b.rows(), "matmul: " + dims(a.rows(), a.cols()) + " * " + dims(b.rows(), b.cols()));
    Matrix<S> out = a.value() * b.value();
    typename Tape<S>::BackwardFn fn;
    if (tracks({a, b})) {
        fn = [a = a.id, b = b.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(a)) {
                tape.grad_buffer(a).noalias() += g * tape.value(b).transpose();
            }
            if (tape.needs_grad(b)) {
                tape.grad_buffer(b).noalias() += tape.value(a).transpose() * g;
            }
        };
    }
    return a.tape->record(OpKind::matmul, std::move(out), {a.id, b.id}, std::move(fn));
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
    require<S>(x.cols() == w.rows(), "linear: input " + dims(x.rows(), x.cols()) + " vs weight " +
                                         dims(w.rows(), w.cols()));
    require<S>(b.rows() == 1 && b.cols() == w.cols(), "linear: bias must be 1x" + std::to_string(w.cols()));
    Matrix<S> out = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, w, b})) {
        fn = [x = x.id, w = w.id, b = b.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x).noalias() += g * tape.value(w).transpose();
            }
            if (tape.needs_grad(w)) {
                tape.grad_buffer(w).noalias() += tape.value(x).transpose() * g;
            }
            if (tape.needs_grad(b)) {
                tape.grad_buffer(b) += g.colwise().sum();
            }
        };
    }
    return x.tape->record(OpKind::linear, std::move(out), {x.id, w.id, b.id}, std::move(fn));
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w) {
    require<S>(x.cols() == w.rows(), "linear: input " + dims(x.rows(), x.cols()) + " vs weight " +
                                         dims(w.rows(), w.cols()));
    Matrix<S> out = x.value() * w.value();
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, w})) {
        fn = [x = x.id, w = w.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x).noalias() += g * tape.value(w).transpose();
            }
            if (tape.needs_grad(w)) {
                tape.grad_buffer(w).noalias() += tape.value(x).transpose() * g;
            }
        };
    }
    return x.tape->record(OpKind::linear, std::move(out), {x.id, w.id}, std::move(fn));
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    require<S>(a.rows() == b.rows() && a.cols() == b.cols(),
               "add: " + dims(a.rows(), a.cols()) + " + " + dims(b.rows(), b.cols()));
    Matrix<S> out = a.value() + b.value();
    typename Tape<S>::BackwardFn fn;
    if (tracks({a, b})) {
        fn = [a = a.id, b = b.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(a)) {
                tape.grad_buffer(a) += g;
            }
            if (tape.needs_grad(b)) {
                tape.grad_buffer(b) += g;
            }
        };
    }
    return a.tape->record(OpKind::add, std::move(out), {a.id, b.id}, std::move(fn));
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    require<S>(a.rows() == b.rows() && a.cols() == b.cols(),
               "sub: " + dims(a.rows(), a.cols()) + " - " + dims(b.rows(), b.cols()));
    Matrix<S> out = a.value() - b.value();
    typename Tape<S>::BackwardFn fn;
    if (tracks({a, b})) {
        fn = [a = a.id, b = b.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(a)) {
                tape.grad_buffer(a) += g;
            }
            if (tape.needs_grad(b)) {
                tape.grad_buffer(b) -= g;
            }
        };
    }
    return a.tape->record(OpKind::add, std::move(out), {a.id, b.id}, std::move(fn));
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
    Matrix<S> out = a.value() * factor;
    typename Tape<S>::BackwardFn fn;
    if (tracks({a})) {
        fn = [a = a.id, factor](Tape<S>& tape, int self) { tape.grad_buffer(a) += tape.grad(self) * factor; };
    }
    return a.tape->record(OpKind::hadamard, std::move(out), {a.id}, std::move(fn));
}

template <typename S>
Var<S> add_row(Var<S> x, Var<S> v) {
    require<S>(v.rows() == 1 && v.cols() == x.cols(), "add_row: row vector must be 1x" + std::to_string(x.cols()));
    Matrix<S> out = x.value();
    out.rowwise() += v.value().row(0);
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, v})) {
        fn = [x = x.id, v = v.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x) += g;
            }
            if (tape.needs_grad(v)) {
                tape.grad_buffer(v) += g.colwise().sum();
            }
        };
    }
    return x.tape->record(OpKind::broadcast, std::move(out), {x.id, v.id}, std::move(fn));
}

template <typename S>
Var<S> add_tiled(Var<S> x, Var<S> table) {
    const Index period = table.rows();
    require<S>(table.cols() == x.cols() && period > 0 && x.rows() % period == 0,
               "add_tiled: table " + dims(table.rows(), table.cols()) + " does not tile " + dims(x.rows(), x.cols()));
    Matrix<S> out = x.value();
    for (Index r = 0; r < out.rows(); ++r) {
        out.row(r) += table.value().row(r % period);
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, table})) {
        fn = [x = x.id, t = table.id, period](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x) += g;
            }
            if (tape.needs_grad(t)) {
                auto& gt = tape.grad_buffer(t);
                for (Index r = 0; r < g.rows(); ++r) {
                    gt.row(r % period) += g.row(r);
                }
            }
        };
    }
    return x.tape->record(OpKind::broadcast, std::move(out), {x.id, table.id}, std::move(fn));
}

template <typename S>
Var<S> add_repeated(Var<S> x, Var<S> table, Index repeat) {
    require<S>(table.cols() == x.cols() && repeat > 0 && x.rows() == table.rows() * repeat,
               "add_repeated: table " + dims(table.rows(), table.cols()) + " x" + std::to_string(repeat) +
                   " does not cover " + dims(x.rows(), x.cols()));
    Matrix<S> out = x.value();
    for (Index r = 0; r < out.rows(); ++r) {
        out.row(r) += table.value().row(r / repeat);
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, table})) {
        fn = [x = x.id, t = table.id, repeat](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x) += g;
            }
            if (tape.needs_grad(t)) {
                auto& gt = tape.grad_buffer(t);
                for (Index r = 0; r < g.rows(); ++r) {
                    gt.row(r / repeat) += g.row(r);
                }
            }
        };
    }
    return x.tape->record(OpKind::broadcast, std::move(out), {x.id, table.id}, std::move(fn));
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
    require<S>(a.rows() == b.rows() && a.cols() == b.cols(),
               "hadamard: " + dims(a.rows(), a.cols()) + " .* " + dims(b.rows(), b.cols()));
    Matrix<S> out = a.value().cwiseProduct(b.value());
    typename Tape<S>::BackwardFn fn;
    if (tracks({a, b})) {
        fn = [a = a.id, b = b.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(a)) {
                tape.grad_buffer(a) += g.cwiseProduct(tape.value(b));
            }
            if (tape.needs_grad(b)) {
                tape.grad_buffer(b) += g.cwiseProduct(tape.value(a));
            }
        };
    }
    return a.tape->record(OpKind::hadamard, std::move(out), {a.id, b.id}, std::move(fn));
}

template <typename S>
Var<S> hadamard_row(Var<S> x, Var<S> v) {
    require<S>(v.rows() == 1 && v.cols() == x.cols(),
               "hadamard_row: row vector must be 1x" + std::to_string(x.cols()));
    Matrix<S> out = (x.value().array().rowwise() * v.value().row(0).array()).matrix();
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, v})) {
        fn = [x = x.id, v = v.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(x)) {
                tape.grad_buffer(x).array() += g.array().rowwise() * tape.value(v).row(0).array();
            }
            if (tape.needs_grad(v)) {
                tape.grad_buffer(v) += g.cwiseProduct(tape.value(x)).colwise().sum();
            }
        };
    }
    return x.tape->record(OpKind::hadamard, std::move(out), {x.id, v.id}, std::move(fn));
}

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
    const Index width = x.cols();
    require<S>(gamma.rows() == 1 && gamma.cols() == width && beta.rows() == 1 && beta.cols() == width,
               "layer_norm: gamma/beta must be 1x" + std::to_string(width));
    const auto& in = x.value();
    Matrix<S> normed(in.rows(), width);
    RowVector<S> inv_std(in.rows());
    for (Index r = 0; r < in.rows(); ++r) {
        const S mean = in.row(r).mean();
        const auto centered = (in.row(r).array() - mean).eval();
        const S var = centered.square().mean();
        inv_std(r) = S(1) / std::sqrt(var + eps);
        normed.row(r) = centered * inv_std(r);
    }
    Matrix<S> out = (normed.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    typename Tape<S>::BackwardFn fn;
    if (tracks({x, gamma, beta})) {
        fn = [x = x.id, gm = gamma.id, bt = beta.id, normed = std::move(normed),
              inv_std = std::move(inv_std)](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            if (tape.needs_grad(gm)) {
                tape.grad_buffer(gm) += g.cwiseProduct(normed).colwise().sum();
            }
            if (tape.needs_grad(bt)) {
                tape.grad_buffer(bt) += g.colwise().sum();
            }
            if (tape.needs_grad(x)) {
                auto& gx = tape.grad_buffer(x);
                const auto& gam = tape.value(gm);
                for (Index r = 0; r < g.rows(); ++r) {
                    const auto dnorm = (g.row(r).array() * gam.row(0).array()).eval();
                    const S mean_d = dnorm.mean();
                    const S mean_dn = (dnorm * normed.row(r).array()).mean();
                    gx.row(r).array() += inv_std(r) * (dnorm - mean_d - normed.row(r).array() * mean_dn);
                }
            }
        };
    }
    return x.tape->record(OpKind::layer_norm, std::move(out), {x.id, gamma.id, beta.id}, std::move(fn));
}

template <typename S>
Var<S> gelu(Var<S> x) {
    const S inv_sqrt2 = S(1) / std::numbers::sqrt2_v<S>;
    Matrix<S> out = x.value().unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id, inv_sqrt2](Tape<S>& tape, int self) {
            const S inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<S>;
            const auto deriv = tape.value(x).unaryExpr([=](S v) {
                return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
            });
            tape.grad_buffer(x) += tape.grad(self).cwiseProduct(deriv);
        };
    }
    return x.tape->record(OpKind::gelu, std::move(out), {x.id}, std::move(fn));
}

template <typename S>
Var<S> softmax_rows(Var<S> x) {
    Matrix<S> out = x.value();
    for (Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            const auto& y = tape.value(self);
            const auto dots = g.cwiseProduct(y).rowwise().sum().eval();
            tape.grad_buffer(x).array() += y.array() * (g.colwise() - dots).array();
        };
    }
    return x.tape->record(OpKind::softmax, std::move(out), {x.id}, std::move(fn));
}

template <typename S>
Var<S> permute_rows(Var<S> x, std::vector<Index> perm) {
    require<S>(static_cast<Index>(perm.size()) == x.rows(), "permute_rows: permutation length mismatch");
    const auto& in = x.value();
    Matrix<S> out(in.rows(), in.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.row(static_cast<Index>(i)) = in.row(perm[i]);
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id, perm = std::move(perm)](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            auto& gx = tape.grad_buffer(x);
            for (std::size_t i = 0; i < perm.size(); ++i) {
                gx.row(perm[i]) += g.row(static_cast<Index>(i));
            }
        };
    }
    return x.tape->record(OpKind::permute, std::move(out), {x.id}, std::move(fn));
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    require<S>(!parts.empty(), "concat_rows: nothing to concatenate");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        require<S>(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
    }
    Matrix<S> out(rows, cols);
    std::vector<int> ids;
    std::vector<Index> offsets;
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        ids.push_back(p.id);
        offsets.push_back(at);
        at += p.rows();
    }
    Tape<S>* tape = parts.front().tape;
    typename Tape<S>::BackwardFn fn;
    bool any = false;
    for (const auto& p : parts) {
        any = any || tracks({p});
    }
    if (any) {
        fn = [ids, offsets](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (tape.needs_grad(ids[i])) {
                    auto& gp = tape.grad_buffer(ids[i]);
                    gp += g.middleRows(offsets[i], gp.rows());
                }
            }
        };
    }
    return tape->record(OpKind::concat, std::move(out), ids, std::move(fn));
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    require<S>(!parts.empty(), "concat_cols: nothing to concatenate");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        require<S>(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix<S> out(rows, cols);
    std::vector<int> ids;
    std::vector<Index> offsets;
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        ids.push_back(p.id);
        offsets.push_back(at);
        at += p.cols();
    }
    Tape<S>* tape = parts.front().tape;
    typename Tape<S>::BackwardFn fn;
    bool any = false;
    for (const auto& p : parts) {
        any = any || tracks({p});
    }
    if (any) {
        fn = [ids, offsets](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (tape.needs_grad(ids[i])) {
                    auto& gp = tape.grad_buffer(ids[i]);
                    gp += g.middleCols(offsets[i], gp.cols());
                }
            }
        };
    }
    return tape->record(OpKind::concat, std::move(out), ids, std::move(fn));
}

template <typename S>
Var<S> mean_rows(Var<S> x, std::vector<Index> rows) {
    require<S>(!rows.empty(), "mean_rows: no rows selected");
    Matrix<S> out = Matrix<S>::Zero(1, x.cols());
    for (Index r : rows) {
        require<S>(r >= 0 && r < x.rows(), "mean_rows: row index out of range");
        out.row(0) += x.value().row(r);
    }
    const S inv = S(1) / static_cast<S>(rows.size());
    out *= inv;
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id, rows = std::move(rows), inv](Tape<S>& tape, int self) {
            const auto& g = tape.grad(self);
            auto& gx = tape.grad_buffer(x);
            for (Index r : rows) {
                gx.row(r) += g.row(0) * inv;
            }
        };
    }
    return x.tape->record(OpKind::mean, std::move(out), {x.id}, std::move(fn));
}

template <typename S>
Var<S> mean_all(Var<S> x) {
    Matrix<S> out(1, 1);
    out(0, 0) = x.value().mean();
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id](Tape<S>& tape, int self) {
            auto& gx = tape.grad_buffer(x);
            gx.array() += tape.grad(self)(0, 0) / static_cast<S>(gx.size());
        };
    }
    return x.tape->record(OpKind::mean, std::move(out), {x.id}, std::move(fn));
}

template <typename S>
Var<S> sqrt(Var<S> x) {
    Matrix<S> out = x.value().cwiseSqrt();
    typename Tape<S>::BackwardFn fn;
    if (tracks({x})) {
        fn = [x = x.id](Tape<S>& tape, int self) {
            tape.grad_buffer(x).array() += tape.grad(self).array() * S(0.5) / tape.value(self).array();
        };
    }
    return x.tape->record(OpKind::sqrt, std::move(out), {x.id}, std::move(fn));
}

namespace {

void check_layout(const AttentionLayout& l, Index q_rows, Index k_rows, Index width, Index k_width) {
    if (l.heads <= 0 || width % l.heads != 0) {
        throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " +
                          std::to_string(l.heads) + " heads");
    }
    if (k_width != width) {
        throw ConfigError("attention: query width " + std::to_string(width) + " vs key width " +
                          std::to_string(k_width));
    }
    if (q_rows != l.groups * l.query_len) {
        throw ShapeError("attention: query rows " + std::to_string(q_rows) + " != groups*query_len");
    }
    const Index key_groups = l.shared_keys ? 1 : l.groups;
    if (k_rows != key_groups * l.key_len) {
        throw ShapeError("attention: key rows " + std::to_string(k_rows) + " != key groups*key_len");
    }
}

} // namespace

template <typename S>
Var<S> attention_scores(Var<S> q, Var<S> k, const AttentionLayout& layout, S scale) {
    check_layout(layout, q.rows(), k.rows(), q.cols(), k.cols());
    const Index d = q.cols() / layout.heads;
    const Index ql = layout.query_len;
    const Index kl = layout.key_len;
    const auto& qv = q.value();
    const auto& kv = k.value();
    Matrix<S> out(layout.groups * layout.heads * ql, kl);
    for (Index g = 0; g < layout.groups; ++g) {
        const Index kg = layout.shared_keys ? 0 : g;
        for (Index h = 0; h < layout.heads; ++h) {
            out.middleRows((g * layout.heads + h) * ql, ql).noalias() =
                scale * qv.block(g * ql, h * d, ql, d) * kv.block(kg * kl, h * d, kl, d).transpose();
        }
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({q, k})) {
        fn = [q = q.id, k = k.id, layout, scale, d](Tape<S>& tape, int self) {
            const auto& gs = tape.grad(self);
            const Index ql = layout.query_len;
            const Index kl = layout.key_len;
            const bool need_q = tape.needs_grad(q);
            const bool need_k = tape.needs_grad(k);
            for (Index g = 0; g < layout.groups; ++g) {
                const Index kg = layout.shared_keys ? 0 : g;
                for (Index h = 0; h < layout.heads; ++h) {
                    const auto gblock = gs.middleRows((g * layout.heads + h) * ql, ql);
                    if (need_q) {
                        tape.grad_buffer(q).block(g * ql, h * d, ql, d).noalias() +=
                            scale * gblock * tape.value(k).block(kg * kl, h * d, kl, d);
                    }
                    if (need_k) {
                        tape.grad_buffer(k).block(kg * kl, h * d, kl, d).noalias() +=
                            scale * gblock.transpose() * tape.value(q).block(g * ql, h * d, ql, d);
                    }
                }
            }
        };
    }
    return q.tape->record(OpKind::matmul, std::move(out), {q.id, k.id}, std::move(fn));
}

template <typename S>
Var<S> attention_apply(Var<S> weights, Var<S> v, const AttentionLayout& layout) {
    const Index ql = layout.query_len;
    const Index kl = layout.key_len;
    const Index key_groups = layout.shared_keys ? 1 : layout.groups;
    require<S>(weights.rows() == layout.groups * layout.heads * ql && weights.cols() == kl,
               "attention_apply: weights shape " + dims(weights.rows(), weights.cols()) + " vs layout");
    require<S>(v.rows() == key_groups * kl, "attention_apply: value rows mismatch");
    if (v.cols() % layout.heads != 0) {
        throw ConfigError("attention_apply: value width not divisible by head count");
    }
    const Index d = v.cols() / layout.heads;
    const auto& av = weights.value();
    const auto& vv = v.value();
    Matrix<S> out(layout.groups * ql, v.cols());
    for (Index g = 0; g < layout.groups; ++g) {
        const Index kg = layout.shared_keys ? 0 : g;
        for (Index h = 0; h < layout.heads; ++h) {
            out.block(g * ql, h * d, ql, d).noalias() =
                av.middleRows((g * layout.heads + h) * ql, ql) * vv.block(kg * kl, h * d, kl, d);
        }
    }
    typename Tape<S>::BackwardFn fn;
    if (tracks({weights, v})) {
        fn = [a = weights.id, v = v.id, layout, d](Tape<S>& tape, int self) {
            const auto& go = tape.grad(self);
            const Index ql = layout.query_len;
            const Index kl = layout.key_len;
            const bool need_a = tape.needs_grad(a);
            const bool need_v = tape.needs_grad(v);
            for (Index g = 0; g < layout.groups; ++g) {
                const Index kg = layout.shared_keys ? 0 : g;
                for (Index h = 0; h < layout.heads; ++h) {
                    const auto gblock = go.block(g * ql, h * d, ql, d);
                    if (need_a) {
                        tape.grad_buffer(a).middleRows((g * layout.heads + h) * ql, ql).noalias() +=
                            gblock * tape.value(v).block(kg * kl, h * d, kl, d).transpose();
                    }
                    if (need_v) {
                        tape.grad_buffer(v).block(kg * kl, h * d, kl, d).noalias() +=
                            tape.value(a).middleRows((g * layout.heads + h) * ql, ql).transpose() * gblock;
                    }
                }
            }
        };
    }
    return weights.tape->record(OpKind::matmul, std::move(out), {weights.id, v.id}, std::move(fn));
}

#define POSEDIFF_INSTANTIATE_AD(S)                                                                  \
    template Var<S> matmul(Var<S>, Var<S>);                                                         \
    template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                 \
    template Var<S> linear(Var<S>, Var<S>);                                                         \
    template Var<S> add(Var<S>, Var<S>);                                                            \
    template Var<S> sub(Var<S>, Var<S>);                                                            \
    template Var<S> scale(Var<S>, S);                                                               \
    template Var<S> add_row(Var<S>, Var<S>);                                                        \
    template Var<S> add_tiled(Var<S>, Var<S>);                                                      \
    template Var<S> add_repeated(Var<S>, Var<S>, Index);                                            \
    template Var<S> hadamard(Var<S>, Var<S>);                                                       \
    template Var<S> hadamard_row(Var<S>, Var<S>);                                                   \
    template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                          \
    template Var<S> gelu(Var<S>);                                                                   \
    template Var<S> softmax_rows(Var<S>);                                                           \
    template Var<S> permute_rows(Var<S>, std::vector<Index>);                                       \
    template Var<S> concat_rows(const std::vector<Var<S>>&);                                        \
    template Var<S> concat_cols(const std::vector<Var<S>>&);                                        \
    template Var<S> mean_rows(Var<S>, std::vector<Index>);                                          \
    template Var<S> mean_all(Var<S>);                                                               \
    template Var<S> sqrt(Var<S>);                                                                   \
    template Var<S> attention_scores(Var<S>, Var<S>, const AttentionLayout&, S);                    \
    template Var<S> attention_apply(Var<S>, Var<S>, const AttentionLayout&);

POSEDIFF_INSTANTIATE_AD(float)
POSEDIFF_INSTANTIATE_AD(double)

#undef POSEDIFF_INSTANTIATE_AD

} // namespace ad

} // namespace posediff
