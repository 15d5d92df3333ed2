#pragma once

// Named parameter storage and the layer building blocks of the networks.

#include "compvae/autodiff.hpp"
#include "compvae/conv.hpp"
#include "compvae/rng.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae::nets {

/// Ordered collection of named parameter tensors.
template <class S>
class ParameterSet {
public:
    std::size_t add(const std::string& name, Matrix<S> init) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        index_[name] = values_.size();
        names_.push_back(name);
        values_.push_back(std::move(init));
        return values_.size() - 1;
    }

    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    Matrix<S>& value(std::size_t i) { return values_.at(i); }
    const Matrix<S>& value(std::size_t i) const { return values_.at(i); }
    std::vector<Matrix<S>>& values() { return values_; }
    const std::vector<Matrix<S>>& values() const { return values_; }

    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Matrix<S>> values_;
    std::map<std::string, std::size_t> index_;
};

/// Per-tape view of a ParameterSet: each parameter enters the tape once, on first use.
template <class S>
class Binding {
public:
    Binding(ad::Tape<S>& tape, const ParameterSet<S>& params, bool trainable = true)
        : tape_(tape), params_(params), vars_(params.size()), trainable_(trainable) {}

    ad::Var<S> operator()(std::size_t i) {
        if (!vars_[i].valid())
            vars_[i] = trainable_ ? tape_.variable(params_.value(i)) : tape_.constant(params_.value(i));
        return vars_[i];
    }

    ad::Tape<S>& tape() { return tape_; }

    /// Gradients of the last backward pass, zeros for parameters not on the tape.
    std::vector<Matrix<S>> gradients() const {
        std::vector<Matrix<S>> out;
        out.reserve(vars_.size());
        for (std::size_t i = 0; i < vars_.size(); ++i) {
            if (vars_[i].valid())
                out.push_back(tape_.grad(vars_[i]));
            else
                out.push_back(Matrix<S>::Zero(params_.value(i).rows(), params_.value(i).cols()));
        }
        return out;
    }

private:
    ad::Tape<S>& tape_;
    const ParameterSet<S>& params_;
    std::vector<ad::Var<S>> vars_;
    bool trainable_;
};

template <class S>
Matrix<S> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    return m;
}

template <class S>
Matrix<S> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
    return m;
}

/// Fully connected layer y = x W + b, weights U(-1/sqrt(in), 1/sqrt(in)).
struct Linear {
    std::size_t weight = 0, bias = 0;
    Eigen::Index in = 0, out = 0;

    template <class S>
    static Linear make(ParameterSet<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Linear l;
        l.in = in;
        l.out = out;
        l.weight = ps.add(name + ".weight", uniform_init<S>(in, out, bound, rng));
        l.bias = ps.add(name + ".bias", uniform_init<S>(1, out, bound, rng));
        return l;
    }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& x) const {
        return ad::add_row(ad::matmul(x, p(weight)), p(bias));
    }
};

/// x + L2(elu(L1(x))): two dense layers with a skip connection.
struct Residual {
    Linear first, second;

    template <class S>
    static Residual make(ParameterSet<S>& ps, const std::string& name, Eigen::Index width, Rng& rng) {
        return {Linear::make(ps, name + ".fc1", width, width, rng), Linear::make(ps, name + ".fc2", width, width, rng)};
    }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& x) const {
        return ad::add(x, second(p, ad::elu(first(p, x))));
    }
};

struct Embedding {
    std::size_t table = 0;
    Eigen::Index count = 0, width = 0;

    template <class S>
    static Embedding make(ParameterSet<S>& ps, const std::string& name, Eigen::Index count, Eigen::Index width,
                          Rng& rng) {
        return {ps.add(name + ".table", normal_init<S>(count, width, 1.0, rng)), count, width};
    }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, std::vector<Eigen::Index> index) const {
        return ad::gather_rows(p(table), std::move(index));
    }
};

struct Conv1d {
    std::size_t weight = 0, bias = 0;
    ad::Conv1dShape shape{};
    Eigen::Index out_channels = 0;

    template <class S>
    static Conv1d make(ParameterSet<S>& ps, const std::string& name, ad::Conv1dShape shape, Eigen::Index out_channels,
                       Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape.in_channels * shape.kernel));
        Conv1d c;
        c.shape = shape;
        c.out_channels = out_channels;
        c.weight = ps.add(name + ".weight", uniform_init<S>(out_channels, shape.in_channels * shape.kernel, bound, rng));
        c.bias = ps.add(name + ".bias", uniform_init<S>(1, out_channels, bound, rng));
        return c;
    }

    Eigen::Index out_length() const { return shape.out_length(); }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& x) const {
        return ad::conv1d(x, p(weight), p(bias), shape);
    }
};

struct ConvTranspose1d {
    std::size_t weight = 0, bias = 0;
    ad::Conv1dShape shape{};
    Eigen::Index out_channels = 0;

    template <class S>
    static ConvTranspose1d make(ParameterSet<S>& ps, const std::string& name, ad::Conv1dShape shape,
                                Eigen::Index out_channels, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(out_channels * shape.kernel));
        ConvTranspose1d c;
        c.shape = shape;
        c.out_channels = out_channels;
        c.weight = ps.add(name + ".weight", uniform_init<S>(shape.in_channels, out_channels * shape.kernel, bound, rng));
        c.bias = ps.add(name + ".bias", uniform_init<S>(1, out_channels, bound, rng));
        return c;
    }

    Eigen::Index out_length() const { return shape.transposed_length(); }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& x) const {
        return ad::conv_transpose1d(x, p(weight), p(bias), shape);
    }
};

struct Conv2d {
    std::size_t weight = 0, bias = 0;
    ad::Conv2dShape shape{};
    Eigen::Index out_channels = 0;

    template <class S>
    static Conv2d make(ParameterSet<S>& ps, const std::string& name, ad::Conv2dShape shape, Eigen::Index out_channels,
                       Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape.in_channels * shape.kernel * shape.kernel));
        Conv2d c;
        c.shape = shape;
        c.out_channels = out_channels;
        c.weight = ps.add(name + ".weight",
                          uniform_init<S>(out_channels, shape.in_channels * shape.kernel * shape.kernel, bound, rng));
        c.bias = ps.add(name + ".bias", uniform_init<S>(1, out_channels, bound, rng));
        return c;
    }

    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& x) const {
        return ad::conv2d(x, p(weight), p(bias), shape);
    }
};

/// One round of message passing over a fully connected graph of K nodes per example:
///   h_i' = f(h_i, sum_{j != i} g(h_j))
/// g: Residual, elu, Residual. f: tanh of the message sum, Residual, concatenation
/// with h_i, Linear(2N, M), elu, Residual(M).
struct GraphBlock {
    Residual g1, g2, f_msg;
    Linear f_merge;
    Residual f_out;

    template <class S>
    static GraphBlock make(ParameterSet<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
        GraphBlock b;
        b.g1 = Residual::make(ps, name + ".g.res0", in, rng);
        b.g2 = Residual::make(ps, name + ".g.res1", in, rng);
        b.f_msg = Residual::make(ps, name + ".f.msg", in, rng);
        b.f_merge = Linear::make(ps, name + ".f.merge", 2 * in, out, rng);
        b.f_out = Residual::make(ps, name + ".f.out", out, rng);
        return b;
    }

    /// `h` holds K consecutive rows per example.
    template <class S>
    ad::Var<S> operator()(Binding<S>& p, const ad::Var<S>& h, Eigen::Index parts) const {
        const ad::Var<S> g = g2(p, ad::elu(g1(p, h)));
        // sum over the other nodes of the same example; empty (zero) when K = 1
        const ad::Var<S> others = ad::sub(ad::repeat_rows(ad::group_sum(g, parts), parts), g);
        const ad::Var<S> msg = f_msg(p, ad::tanh(others));
        const ad::Var<S> merged = ad::elu(f_merge(p, ad::concat_cols<S>({msg, h})));
        return f_out(p, merged);
    }
};

}  // namespace compvae::nets
