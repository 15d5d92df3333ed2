#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation of one forward pass; calling
// backward() on a 1x1 result propagates gradients to every recorded node
// that transitively depends on a variable leaf.
//
// Batched tensors are stored as matrices with one row per example. Grouped
// tensors (K parts per example) use K consecutive rows per example, so that
// row n*K + i is part i of example n.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

template <class S>
class Tape;

/// Handle to a node recorded on a Tape.
template <class S>
class Var {
public:
    Var() = default;
    Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Matrix<S>& value() const { return tape_->value(id_); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    S scalar() const { return value()(0, 0); }

    Tape<S>* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape<S>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class S>
class Tape {
public:
    using Backward = std::function<void(const Matrix<S>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<S> constant(Matrix<S> value) { return push(std::move(value), false, nullptr); }
    Var<S> variable(Matrix<S> value) { return push(std::move(value), true, nullptr); }

    /// Records the output of an operation. The backward closure is kept only
    /// when some input needs a gradient.
    Var<S> record(Matrix<S> value, std::initializer_list<Var<S>> inputs, Backward backward) {
        bool needs = false;
        for (const auto& v : inputs) needs = needs || requires_grad(v);
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    Var<S> record(Matrix<S> value, const std::vector<Var<S>>& inputs, Backward backward) {
        bool needs = false;
        for (const auto& v : inputs) needs = needs || requires_grad(v);
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    const Matrix<S>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(const Var<S>& v) const { return nodes_.at(v.id()).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Adds `g` into the gradient of `v` when `v` participates in differentiation.
    template <class Expr>
    void accumulate(const Var<S>& v, const Expr& g) {
        Node& n = nodes_[v.id()];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    bool needs(const Var<S>& v) const { return nodes_[v.id()].requires_grad; }

    void backward(const Var<S>& root) {
        if (root.rows() != 1 || root.cols() != 1)
            throw std::invalid_argument("Tape::backward: root must be a scalar");
        Node& r = nodes_[root.id()];
        if (!r.requires_grad) return;
        r.grad = Matrix<S>::Ones(1, 1);
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) n.backward(n.grad);
        }
    }

    /// Gradient of the last backward() root w.r.t. `v`; zeros if unreached.
    Matrix<S> grad(const Var<S>& v) const {
        const Node& n = nodes_.at(v.id());
        if (n.grad.size() == 0) return Matrix<S>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

private:
    struct Node {
        Matrix<S> value;
        Matrix<S> grad;
        Backward backward;
        bool requires_grad = false;
    };

    Var<S> push(Matrix<S> value, bool requires_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix<S>(), std::move(backward), requires_grad});
        return Var<S>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
};

namespace detail {

inline void check(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

template <class S>
void same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
}

}  // namespace detail

template <class S>
Var<S> constant_like(const Var<S>& anchor, Matrix<S> value) {
    return anchor.tape()->constant(std::move(value));
}

// ---------------------------------------------------------------- linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape<S>* t = a.tape();
    return t->record(a.value() * b.value(), {a, b}, [t, a, b](const Matrix<S>& g) {
        if (t->needs(a)) t->accumulate(a, g * b.value().transpose());
        if (t->needs(b)) t->accumulate(b, a.value().transpose() * g);
    });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::same_shape(a, b, "add");
    Tape<S>* t = a.tape();
    return t->record(a.value() + b.value(), {a, b}, [t, a, b](const Matrix<S>& g) {
        t->accumulate(a, g);
        t->accumulate(b, g);
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    detail::same_shape(a, b, "sub");
    Tape<S>* t = a.tape();
    return t->record(a.value() - b.value(), {a, b}, [t, a, b](const Matrix<S>& g) {
        t->accumulate(a, g);
        t->accumulate(b, -g);
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    detail::same_shape(a, b, "mul");
    Tape<S>* t = a.tape();
    return t->record(a.value().cwiseProduct(b.value()), {a, b}, [t, a, b](const Matrix<S>& g) {
        if (t->needs(a)) t->accumulate(a, g.cwiseProduct(b.value()));
        if (t->needs(b)) t->accumulate(b, g.cwiseProduct(a.value()));
    });
}

/// Adds a 1 x n row to every row of `a`.
template <class S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
    detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch");
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().rowwise() + row.value().row(0);
    return t->record(std::move(out), {a, row}, [t, a, row](const Matrix<S>& g) {
        t->accumulate(a, g);
        if (t->needs(row)) t->accumulate(row, g.colwise().sum());
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
    Tape<S>* t = a.tape();
    return t->record(a.value() * c, {a}, [t, a, c](const Matrix<S>& g) { t->accumulate(a, g * c); });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().array() + c;
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) { t->accumulate(a, g); });
}

// ---------------------------------------------------------------- pointwise

template <class S>
Var<S> elu(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().unaryExpr([](S x) { return x > S(0) ? x : std::expm1(x); });
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) {
        Matrix<S> d = a.value().unaryExpr([](S x) { return x > S(0) ? S(1) : std::exp(x); });
        t->accumulate(a, g.cwiseProduct(d));
    });
}

template <class S>
Var<S> tanh(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().array().tanh();
    const std::size_t out_id = t->size();
    return t->record(std::move(out), {a}, [t, a, out_id](const Matrix<S>& g) {
        const Matrix<S>& y = t->value(out_id);
        t->accumulate(a, g.cwiseProduct((S(1) - y.array().square()).matrix()));
    });
}

template <class S>
Var<S> exp(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().array().exp();
    const std::size_t out_id = t->size();
    return t->record(std::move(out), {a}, [t, a, out_id](const Matrix<S>& g) {
        t->accumulate(a, g.cwiseProduct(t->value(out_id)));
    });
}

template <class S>
Var<S> log(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().array().log();
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) {
        t->accumulate(a, g.cwiseQuotient(a.value()));
    });
}

template <class S>
Var<S> square(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().array().square();
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) {
        t->accumulate(a, (g.cwiseProduct(a.value()) * S(2)).eval());
    });
}

/// max(a, floor); the gradient is passed through where a >= floor.
template <class S>
Var<S> clamp_min(const Var<S>& a, S floor) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().cwiseMax(floor);
    return t->record(std::move(out), {a}, [t, a, floor](const Matrix<S>& g) {
        Matrix<S> d = (a.value().array() >= floor).template cast<S>();
        t->accumulate(a, g.cwiseProduct(d));
    });
}

// ---------------------------------------------------------------- reductions

template <class S>
Var<S> sum(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out(1, 1);
    out(0, 0) = a.value().sum();
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) {
        t->accumulate(a, Matrix<S>::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

template <class S>
Var<S> mean(const Var<S>& a) {
    return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

/// Sums each row: (n x m) -> (n x 1).
template <class S>
Var<S> row_sum(const Var<S>& a) {
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().rowwise().sum();
    return t->record(std::move(out), {a}, [t, a](const Matrix<S>& g) {
        t->accumulate(a, g.col(0).replicate(1, a.cols()));
    });
}

// ---------------------------------------------------------------- layout

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    detail::check(!parts.empty(), "concat_cols: no inputs");
    Tape<S>* t = parts.front().tape();
    const Eigen::Index n = parts.front().rows();
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        detail::check(p.rows() == n, "concat_cols: row count mismatch");
        total += p.cols();
    }
    Matrix<S> out(n, total);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return t->record(std::move(out), parts, [t, parts](const Matrix<S>& g) {
        Eigen::Index o = 0;
        for (const auto& p : parts) {
            if (t->needs(p)) t->accumulate(p, g.middleCols(o, p.cols()));
            o += p.cols();
        }
    });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index start, Eigen::Index count) {
    detail::check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().middleCols(start, count);
    return t->record(std::move(out), {a}, [t, a, start, count](const Matrix<S>& g) {
        Matrix<S> full = Matrix<S>::Zero(a.rows(), a.cols());
        full.middleCols(start, count) = g;
        t->accumulate(a, full);
    });
}

/// Repeats every row `reps` times consecutively: (n x m) -> (n*reps x m).
template <class S>
Var<S> repeat_rows(const Var<S>& a, Eigen::Index reps) {
    detail::check(reps >= 1, "repeat_rows: reps must be >= 1");
    Tape<S>* t = a.tape();
    const Eigen::Index n = a.rows();
    Matrix<S> out(n * reps, a.cols());
    for (Eigen::Index r = 0; r < n; ++r) out.middleRows(r * reps, reps) = a.value().row(r).replicate(reps, 1);
    return t->record(std::move(out), {a}, [t, a, n, reps](const Matrix<S>& g) {
        Matrix<S> acc(n, a.cols());
        for (Eigen::Index r = 0; r < n; ++r) acc.row(r) = g.middleRows(r * reps, reps).colwise().sum();
        t->accumulate(a, acc);
    });
}

/// Sums consecutive blocks of `group` rows: (n*group x m) -> (n x m).
template <class S>
Var<S> group_sum(const Var<S>& a, Eigen::Index group) {
    detail::check(group >= 1 && a.rows() % group == 0, "group_sum: rows not divisible by group");
    Tape<S>* t = a.tape();
    const Eigen::Index n = a.rows() / group;
    Matrix<S> out(n, a.cols());
    for (Eigen::Index r = 0; r < n; ++r) out.row(r) = a.value().middleRows(r * group, group).colwise().sum();
    return t->record(std::move(out), {a}, [t, a, n, group](const Matrix<S>& g) {
        Matrix<S> acc(n * group, a.cols());
        for (Eigen::Index r = 0; r < n; ++r) acc.middleRows(r * group, group) = g.row(r).replicate(group, 1);
        t->accumulate(a, acc);
    });
}

/// Tiles columns: (n x m) -> (n x m*reps) as [a a ... a].
template <class S>
Var<S> tile_cols(const Var<S>& a, Eigen::Index reps) {
    detail::check(reps >= 1, "tile_cols: reps must be >= 1");
    Tape<S>* t = a.tape();
    Matrix<S> out = a.value().replicate(1, reps);
    return t->record(std::move(out), {a}, [t, a, reps](const Matrix<S>& g) {
        Matrix<S> acc = Matrix<S>::Zero(a.rows(), a.cols());
        for (Eigen::Index k = 0; k < reps; ++k) acc += g.middleCols(k * a.cols(), a.cols());
        t->accumulate(a, acc);
    });
}

/// Row lookup into an embedding table.
template <class S>
Var<S> gather_rows(const Var<S>& table, std::vector<Eigen::Index> index) {
    Tape<S>* t = table.tape();
    Matrix<S> out(static_cast<Eigen::Index>(index.size()), table.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        detail::check(index[i] >= 0 && index[i] < table.rows(), "gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
    }
    return t->record(std::move(out), {table}, [t, table, index = std::move(index)](const Matrix<S>& g) {
        Matrix<S> acc = Matrix<S>::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < index.size(); ++i) acc.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
        t->accumulate(table, acc);
    });
}

// ---------------------------------------------------------------- likelihoods

/// Per-row negative log-density of a diagonal normal with log-variances
/// `log_var`: 0.5 * sum(log(2 pi) + log_var + (x - mu)^2 / exp(log_var)).
template <class S>
Var<S> gaussian_nll(const Var<S>& x, const Var<S>& mu, const Var<S>& log_var) {
    detail::same_shape(x, mu, "gaussian_nll");
    detail::same_shape(x, log_var, "gaussian_nll");
    Tape<S>* t = x.tape();
    const S log2pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
    Matrix<S> inv_var = (-log_var.value().array()).exp();
    Matrix<S> diff = x.value() - mu.value();
    Matrix<S> terms = (log_var.value().array() + diff.array().square() * inv_var.array() + log2pi) * S(0.5);
    Matrix<S> out = terms.rowwise().sum();
    return t->record(std::move(out), {x, mu, log_var},
                     [t, x, mu, log_var, inv_var = std::move(inv_var), diff = std::move(diff)](const Matrix<S>& g) {
                         const auto gb = g.col(0).replicate(1, diff.cols()).array();
                         Matrix<S> dmu = (gb * diff.array() * inv_var.array());
                         if (t->needs(x)) t->accumulate(x, dmu);
                         if (t->needs(mu)) t->accumulate(mu, (-dmu).eval());
                         if (t->needs(log_var)) {
                             Matrix<S> dlv = gb * (S(1) - diff.array().square() * inv_var.array()) * S(0.5);
                             t->accumulate(log_var, dlv);
                         }
                     });
}

/// Reparametrized draw mu + exp(log_var / 2) * noise.
template <class S>
Var<S> gaussian_sample(const Var<S>& mu, const Var<S>& log_var, const Matrix<S>& noise) {
    detail::same_shape(mu, log_var, "gaussian_sample");
    detail::check(noise.rows() == mu.rows() && noise.cols() == mu.cols(), "gaussian_sample: noise shape mismatch");
    Var<S> eps = mu.tape()->constant(noise);
    return add(mu, mul(exp(scale(log_var, S(0.5))), eps));
}

// ---------------------------------------------------------------- operators

template <class S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <class S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <class S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <class S> Var<S> operator-(const Var<S>& a) { return scale(a, S(-1)); }

}  // namespace ad
}  // namespace compvae
