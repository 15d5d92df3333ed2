#pragma once

// Convolution-family operations for the autodiff tape.
//
// Activations are stored one example per row, channel-major: a (C, L)
// signal occupies columns c*L + l, a (C, H, W) image columns (c*H + y)*W + x.
// Weight layouts follow the usual deep-learning conventions flattened to 2D:
//   conv1d            (C_out, C_in * k)
//   conv_transpose1d  (C_in,  C_out * k)
//   conv2d            (C_out, C_in * kh * kw)

#include "compvae/autodiff.hpp"

namespace compvae::ad {

struct Conv1dShape {
    Eigen::Index in_channels;
    Eigen::Index length;
    Eigen::Index kernel;
    Eigen::Index stride = 1;
    Eigen::Index padding = 0;

    Eigen::Index out_length() const { return (length + 2 * padding - kernel) / stride + 1; }
    Eigen::Index transposed_length() const { return (length - 1) * stride - 2 * padding + kernel; }
};

struct Conv2dShape {
    Eigen::Index in_channels;
    Eigen::Index height;
    Eigen::Index width;
    Eigen::Index kernel;
    Eigen::Index stride = 1;
    Eigen::Index padding = 0;

    Eigen::Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
    Eigen::Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

namespace detail {

// Unfolds a batch of 1D signals into a (C_in*k, N*L_out) column matrix.
template <class S>
Matrix<S> im2col_1d(const Matrix<S>& x, const Conv1dShape& s) {
    const Eigen::Index n = x.rows(), lo = s.out_length();
    Matrix<S> col = Matrix<S>::Zero(s.in_channels * s.kernel, n * lo);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < s.in_channels; ++c)
            for (Eigen::Index kk = 0; kk < s.kernel; ++kk)
                for (Eigen::Index o = 0; o < lo; ++o) {
                    const Eigen::Index src = o * s.stride - s.padding + kk;
                    if (src >= 0 && src < s.length) col(c * s.kernel + kk, b * lo + o) = x(b, c * s.length + src);
                }
    return col;
}

// Adjoint of im2col_1d: folds columns back onto (N, C_in*L), summing overlaps.
template <class S>
Matrix<S> col2im_1d(const Matrix<S>& col, Eigen::Index n, const Conv1dShape& s) {
    const Eigen::Index lo = s.out_length();
    Matrix<S> x = Matrix<S>::Zero(n, s.in_channels * s.length);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < s.in_channels; ++c)
            for (Eigen::Index kk = 0; kk < s.kernel; ++kk)
                for (Eigen::Index o = 0; o < lo; ++o) {
                    const Eigen::Index src = o * s.stride - s.padding + kk;
                    if (src >= 0 && src < s.length) x(b, c * s.length + src) += col(c * s.kernel + kk, b * lo + o);
                }
    return x;
}

template <class S>
Matrix<S> im2col_2d(const Matrix<S>& x, const Conv2dShape& s) {
    const Eigen::Index n = x.rows(), ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    Matrix<S> col = Matrix<S>::Zero(s.in_channels * k * k, n * ho * wo);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < s.in_channels; ++c)
            for (Eigen::Index ky = 0; ky < k; ++ky)
                for (Eigen::Index kx = 0; kx < k; ++kx) {
                    const Eigen::Index row = (c * k + ky) * k + kx;
                    for (Eigen::Index oy = 0; oy < ho; ++oy) {
                        const Eigen::Index sy = oy * s.stride - s.padding + ky;
                        if (sy < 0 || sy >= s.height) continue;
                        for (Eigen::Index ox = 0; ox < wo; ++ox) {
                            const Eigen::Index sx = ox * s.stride - s.padding + kx;
                            if (sx < 0 || sx >= s.width) continue;
                            col(row, (b * ho + oy) * wo + ox) = x(b, (c * s.height + sy) * s.width + sx);
                        }
                    }
                }
    return col;
}

template <class S>
Matrix<S> col2im_2d(const Matrix<S>& col, Eigen::Index n, const Conv2dShape& s) {
    const Eigen::Index ho = s.out_height(), wo = s.out_width(), k = s.kernel;
    Matrix<S> x = Matrix<S>::Zero(n, s.in_channels * s.height * s.width);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < s.in_channels; ++c)
            for (Eigen::Index ky = 0; ky < k; ++ky)
                for (Eigen::Index kx = 0; kx < k; ++kx) {
                    const Eigen::Index row = (c * k + ky) * k + kx;
                    for (Eigen::Index oy = 0; oy < ho; ++oy) {
                        const Eigen::Index sy = oy * s.stride - s.padding + ky;
                        if (sy < 0 || sy >= s.height) continue;
                        for (Eigen::Index ox = 0; ox < wo; ++ox) {
                            const Eigen::Index sx = ox * s.stride - s.padding + kx;
                            if (sx < 0 || sx >= s.width) continue;
                            x(b, (c * s.height + sy) * s.width + sx) += col(row, (b * ho + oy) * wo + ox);
                        }
                    }
                }
    return x;
}

// (C, N*P) block layout <-> (N, C*P) row layout.
template <class S>
Matrix<S> blocks_to_rows(const Matrix<S>& m, Eigen::Index n, Eigen::Index p) {
    const Eigen::Index c = m.rows();
    Matrix<S> out(n, c * p);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index ch = 0; ch < c; ++ch) out.block(b, ch * p, 1, p) = m.block(ch, b * p, 1, p);
    return out;
}

template <class S>
Matrix<S> rows_to_blocks(const Matrix<S>& m, Eigen::Index c, Eigen::Index p) {
    const Eigen::Index n = m.rows();
    Matrix<S> out(c, n * p);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index ch = 0; ch < c; ++ch) out.block(ch, b * p, 1, p) = m.block(b, ch * p, 1, p);
    return out;
}

}  // namespace detail

/// 1D convolution (cross-correlation). bias is 1 x C_out.
template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Conv1dShape s) {
    detail::check(x.cols() == s.in_channels * s.length, "conv1d: input width mismatch");
    detail::check(weight.cols() == s.in_channels * s.kernel, "conv1d: weight shape mismatch");
    detail::check(bias.rows() == 1 && bias.cols() == weight.rows(), "conv1d: bias shape mismatch");
    detail::check(s.out_length() >= 1, "conv1d: empty output");
    Tape<S>* t = x.tape();
    const Eigen::Index n = x.rows(), lo = s.out_length(), cout = weight.rows();
    Matrix<S> col = detail::im2col_1d(x.value(), s);
    Matrix<S> y = weight.value() * col;
    y.colwise() += bias.value().row(0).transpose();
    Matrix<S> out = detail::blocks_to_rows(y, n, lo);
    return t->record(std::move(out), {x, weight, bias},
                     [t, x, weight, bias, s, n, lo, cout, col = std::move(col)](const Matrix<S>& g) {
                         Matrix<S> gb = detail::rows_to_blocks(g, cout, lo);
                         if (t->needs(weight)) t->accumulate(weight, gb * col.transpose());
                         if (t->needs(bias)) t->accumulate(bias, gb.rowwise().sum().transpose());
                         if (t->needs(x)) t->accumulate(x, detail::col2im_1d<S>(weight.value().transpose() * gb, n, s));
                     });
}

/// 1D transposed convolution; the adjoint of conv1d with the same geometry.
/// Output length (L - 1) * stride - 2 * padding + kernel.
template <class S>
Var<S> conv_transpose1d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Conv1dShape s) {
    detail::check(x.cols() == s.in_channels * s.length, "conv_transpose1d: input width mismatch");
    detail::check(weight.rows() == s.in_channels && weight.cols() % s.kernel == 0,
                  "conv_transpose1d: weight shape mismatch");
    const Eigen::Index cout = weight.cols() / s.kernel;
    detail::check(bias.rows() == 1 && bias.cols() == cout, "conv_transpose1d: bias shape mismatch");
    Tape<S>* t = x.tape();
    const Eigen::Index n = x.rows(), lin = s.length, lout = s.transposed_length();
    detail::check(lout >= 1, "conv_transpose1d: empty output");
    // the output geometry seen as the input of the adjoint convolution
    const Conv1dShape adj{cout, lout, s.kernel, s.stride, s.padding};
    detail::check(adj.out_length() == lin, "conv_transpose1d: inconsistent geometry");
    Matrix<S> xb = detail::rows_to_blocks(x.value(), s.in_channels, lin);
    Matrix<S> col = weight.value().transpose() * xb;
    Matrix<S> out = detail::col2im_1d(col, n, adj);
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < cout; ++c) out.block(b, c * lout, 1, lout).array() += bias.value()(0, c);
    return t->record(std::move(out), {x, weight, bias},
                     [t, x, weight, bias, adj, n, lin, cout, lout, xb = std::move(xb)](const Matrix<S>& g) {
                         Matrix<S> gcol = detail::im2col_1d(g, adj);
                         if (t->needs(weight)) t->accumulate(weight, xb * gcol.transpose());
                         if (t->needs(bias)) {
                             Matrix<S> gbias(1, cout);
                             for (Eigen::Index c = 0; c < cout; ++c) gbias(0, c) = g.middleCols(c * lout, lout).sum();
                             t->accumulate(bias, gbias);
                         }
                         if (t->needs(x)) {
                             Matrix<S> gx = weight.value() * gcol;
                             t->accumulate(x, detail::blocks_to_rows(gx, n, lin));
                         }
                     });
}

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Conv2dShape s) {
    detail::check(x.cols() == s.in_channels * s.height * s.width, "conv2d: input width mismatch");
    detail::check(weight.cols() == s.in_channels * s.kernel * s.kernel, "conv2d: weight shape mismatch");
    detail::check(bias.rows() == 1 && bias.cols() == weight.rows(), "conv2d: bias shape mismatch");
    Tape<S>* t = x.tape();
    const Eigen::Index n = x.rows(), p = s.out_height() * s.out_width(), cout = weight.rows();
    detail::check(p >= 1, "conv2d: empty output");
    Matrix<S> col = detail::im2col_2d(x.value(), s);
    Matrix<S> y = weight.value() * col;
    y.colwise() += bias.value().row(0).transpose();
    Matrix<S> out = detail::blocks_to_rows(y, n, p);
    return t->record(std::move(out), {x, weight, bias},
                     [t, x, weight, bias, s, n, p, cout, col = std::move(col)](const Matrix<S>& g) {
                         Matrix<S> gb = detail::rows_to_blocks(g, cout, p);
                         if (t->needs(weight)) t->accumulate(weight, gb * col.transpose());
                         if (t->needs(bias)) t->accumulate(bias, gb.rowwise().sum().transpose());
                         if (t->needs(x)) t->accumulate(x, detail::col2im_2d<S>(weight.value().transpose() * gb, n, s));
                     });
}

namespace detail {

// Linear interpolation taps for doubling one axis with half-pixel centers
// (source coordinate (o + 0.5) / 2 - 0.5, clamped at the borders).
struct UpsampleTap {
    Eigen::Index lo, hi;
    double w_hi;
};

inline std::vector<UpsampleTap> upsample_taps(Eigen::Index in) {
    std::vector<UpsampleTap> taps(static_cast<std::size_t>(2 * in));
    for (Eigen::Index o = 0; o < 2 * in; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        auto lo = static_cast<Eigen::Index>(src);
        if (lo > in - 1) lo = in - 1;
        const Eigen::Index hi = std::min(lo + 1, in - 1);
        taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
    }
    return taps;
}

}  // namespace detail

/// Bilinear x2 upsampling of (C, H, W) images.
template <class S>
Var<S> upsample_bilinear2x(const Var<S>& x, Eigen::Index channels, Eigen::Index height, Eigen::Index width) {
    detail::check(x.cols() == channels * height * width, "upsample_bilinear2x: shape mismatch");
    Tape<S>* t = x.tape();
    const auto ty = detail::upsample_taps(height), tx = detail::upsample_taps(width);
    const Eigen::Index n = x.rows(), ho = 2 * height, wo = 2 * width;
    Matrix<S> out(n, channels * ho * wo);
    const Matrix<S>& xv = x.value();
    for (Eigen::Index b = 0; b < n; ++b)
        for (Eigen::Index c = 0; c < channels; ++c)
            for (Eigen::Index oy = 0; oy < ho; ++oy) {
                const auto& a = ty[static_cast<std::size_t>(oy)];
                const S wy = static_cast<S>(a.w_hi);
                for (Eigen::Index ox = 0; ox < wo; ++ox) {
                    const auto& e = tx[static_cast<std::size_t>(ox)];
                    const S wx = static_cast<S>(e.w_hi);
                    auto at = [&](Eigen::Index yy, Eigen::Index xx) { return xv(b, (c * height + yy) * width + xx); };
                    out(b, (c * ho + oy) * wo + ox) =
                        (S(1) - wy) * ((S(1) - wx) * at(a.lo, e.lo) + wx * at(a.lo, e.hi)) +
                        wy * ((S(1) - wx) * at(a.hi, e.lo) + wx * at(a.hi, e.hi));
                }
            }
    return t->record(std::move(out), {x}, [t, x, ty, tx, n, channels, height, width, ho, wo](const Matrix<S>& g) {
        Matrix<S> gx = Matrix<S>::Zero(n, channels * height * width);
        for (Eigen::Index b = 0; b < n; ++b)
            for (Eigen::Index c = 0; c < channels; ++c)
                for (Eigen::Index oy = 0; oy < ho; ++oy) {
                    const auto& a = ty[static_cast<std::size_t>(oy)];
                    const S wy = static_cast<S>(a.w_hi);
                    for (Eigen::Index ox = 0; ox < wo; ++ox) {
                        const auto& e = tx[static_cast<std::size_t>(ox)];
                        const S wx = static_cast<S>(e.w_hi);
                        const S gv = g(b, (c * ho + oy) * wo + ox);
                        auto at = [&](Eigen::Index yy, Eigen::Index xx) -> S& {
                            return gx(b, (c * height + yy) * width + xx);
                        };
                        at(a.lo, e.lo) += gv * (S(1) - wy) * (S(1) - wx);
                        at(a.lo, e.hi) += gv * (S(1) - wy) * wx;
                        at(a.hi, e.lo) += gv * wy * (S(1) - wx);
                        at(a.hi, e.hi) += gv * wy * wx;
                    }
                }
        t->accumulate(x, gx);
    });
}

/// Keeps samples [start, start + count) of every channel of a (C, L) signal.
template <class S>
Var<S> crop1d(const Var<S>& x, Eigen::Index channels, Eigen::Index length, Eigen::Index start, Eigen::Index count) {
    detail::check(x.cols() == channels * length, "crop1d: shape mismatch");
    detail::check(start >= 0 && count >= 1 && start + count <= length, "crop1d: window out of range");
    Tape<S>* t = x.tape();
    Matrix<S> out(x.rows(), channels * count);
    for (Eigen::Index c = 0; c < channels; ++c) out.middleCols(c * count, count) = x.value().middleCols(c * length + start, count);
    return t->record(std::move(out), {x}, [t, x, channels, length, start, count](const Matrix<S>& g) {
        Matrix<S> gx = Matrix<S>::Zero(x.rows(), channels * length);
        for (Eigen::Index c = 0; c < channels; ++c) gx.middleCols(c * length + start, count) = g.middleCols(c * count, count);
        t->accumulate(x, gx);
    });
}

}  // namespace compvae::ad
